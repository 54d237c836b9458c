use super::{clip_grad_norm, dpo_loss, sample_timestep, sft_loss, AdamW, FlowBatch, Phase, TrainConfig};
use crate::data::EditPairRecord;
use crate::error::{Error, Result};
use crate::flow::{encode_geometry, encode_texture, image_tokens, occupancy_tokens, FlowModel, ModelConfig, Stage};
use crate::rng::{derive_seed, rng_from, stream, stream_rng};
use crate::tensor::{Checkpoint, GradMap, Graph, ParamSet, ParameterStore, Tensor};
use crate::voxel::{render_ortho, Category, InstrTokens, VoxelAsset, NULL_TOKENS};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// A dispreferred target sharing the example's condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Negative {
    pub x0: Vec<f32>,
    pub mask: Option<Vec<f32>>,
}

/// A training example in latent form.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seed: u64,
    pub image: Vec<f32>,
    pub x0: Vec<f32>,
    /// Texture stage: occupancy tokens, which also define the loss mask.
    pub mask: Option<Vec<f32>>,
    pub instr: InstrTokens,
    pub neg: Option<Negative>,
}

type Target = (Vec<f32>, Option<Vec<f32>>);

fn encode_target(asset: &VoxelAsset, cfg: &ModelConfig) -> Result<Target> {
    let p = cfg.patch;
    match cfg.stage {
        Stage::Geometry => Ok((encode_geometry(asset, p)?, None)),
        Stage::Texture => {
            let x0 = encode_texture(asset, p)?;
            let mask = occupancy_tokens(asset.occupancy(), asset.grid(), p)?;
            Ok((x0, Some(mask)))
        }
    }
}

fn wanted(phase: Phase, stage: Stage, cat: Category) -> bool {
    match (phase, stage) {
        (Phase::BasePretrain, _) => true,
        (_, Stage::Texture) => cat == Category::Texture,
        (_, Stage::Geometry) => cat != Category::Texture,
    }
}

/// Converts records into latent examples for a phase. Base pretraining
/// uses every source and every edited asset as an image-to-3D pair;
/// finetuning keeps the categories that belong to the stage.
pub fn prepare_examples(phase: Phase, cfg: &ModelConfig, records: &[EditPairRecord]) -> Result<Vec<Example>> {
    let make = |seed: u64, asset: &VoxelAsset, image: &crate::voxel::ViewImage, instr: InstrTokens, neg: Option<&VoxelAsset>| -> Result<Example> {
        if asset.grid() != cfg.grid {
            return Err(Error::Contract(format!("asset grid {} vs model grid {}", asset.grid(), cfg.grid)));
        }
        let (x0, mask) = encode_target(asset, cfg)?;
        let neg = neg
            .map(|n| encode_target(n, cfg).map(|(x0, mask)| Negative { x0, mask }))
            .transpose()?;
        Ok(Example {
            seed,
            image: image_tokens::<f32>(&[image], cfg)?.into_data(),
            x0,
            mask,
            instr,
            neg,
        })
    };
    match phase {
        Phase::BasePretrain => {
            let mut seen = HashSet::new();
            let mut jobs: Vec<(&EditPairRecord, bool)> = Vec::new();
            for r in records {
                if seen.insert(r.seed) {
                    jobs.push((r, false));
                }
                jobs.push((r, true));
            }
            jobs.par_iter()
                .map(|&(r, edited)| {
                    if edited {
                        let img = render_ortho(&r.edited, r.condition.view, r.condition.width);
                        make(r.seed, &r.edited, &img, NULL_TOKENS, None)
                    } else {
                        make(r.seed, &r.source, &r.condition, NULL_TOKENS, None)
                    }
                })
                .collect()
        }
        Phase::Sft | Phase::Dpo => records
            .par_iter()
            .filter(|r| wanted(phase, cfg.stage, r.category()))
            .map(|r| {
                let neg = (phase == Phase::Dpo).then_some(&r.source);
                make(r.seed, &r.edited, &r.condition, r.tokens, neg)
            })
            .collect(),
    }
}

/// Deterministic hold-out: scenes whose seed hash falls in the bottom 5%.
pub fn validation_split(seed: u64) -> bool {
    derive_seed(seed, "validation", 0).is_multiple_of(20)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: FlowModel,
    pub reference: Option<ParameterStore<f32>>,
    pub optim: AdamW,
    pub step: u64,
    train: Vec<Example>,
    val: Vec<Example>,
}

struct Assembled {
    pos: FlowBatch<f32>,
    neg: Option<FlowBatch<f32>>,
    seed: u64,
}

impl Trainer {
    /// Sets up a phase. Base pretraining starts from `init` or a fresh
    /// model; finetuning requires `init` (a base model for SFT, an SFT
    /// model for DPO). The DPO reference defaults to a copy of `init`.
    pub fn new(
        config: TrainConfig,
        init: Option<FlowModel>,
        reference: Option<FlowModel>,
        train: Vec<Example>,
        val: Vec<Example>,
        model_config: ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model_config.stage != config.stage {
            return Err(Error::Config(format!(
                "model stage {} does not match training stage {}",
                model_config.stage.name(),
                config.stage.name()
            )));
        }
        let mut reference = reference;
        let model = match (config.phase, init) {
            (Phase::BasePretrain, None) => FlowModel::init_base(model_config, config.seed)?,
            (Phase::BasePretrain, Some(m)) if !m.has_control() => m,
            (Phase::BasePretrain, Some(_)) => {
                return Err(Error::Contract("base pretraining cannot continue a steered checkpoint".into()))
            }
            (Phase::Sft, None) => {
                return Err(Error::MissingPrerequisite(
                    "sft needs a base-pretrain checkpoint for this stage".into(),
                ))
            }
            (Phase::Sft, Some(mut m)) => {
                if !m.has_control() {
                    m.init_control(config.seed)?;
                }
                m
            }
            (Phase::Dpo, init) => {
                if config.stage == Stage::Geometry && !config.allow_geometry_dpo {
                    return Err(Error::Config(
                        "DPO is not performed on the geometry stage; set allow_geometry_dpo=true to override".into(),
                    ));
                }
                let m = match init {
                    Some(m) if m.has_control() => m,
                    _ => return Err(Error::MissingPrerequisite("dpo needs an sft checkpoint".into())),
                };
                if reference.is_none() {
                    reference = Some(m.clone());
                }
                m
            }
        };
        if model.config.stage != config.stage {
            return Err(Error::Config("checkpoint stage does not match training stage".into()));
        }
        if config.phase == Phase::Dpo && train.iter().any(|e| e.neg.is_none()) {
            return Err(Error::Contract("DPO examples need negatives".into()));
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if config.phase == Phase::Dpo && config.stage == Stage::Geometry {
            eprintln!("warning: running DPO on the geometry stage (override enabled)");
        }
        Ok(Self {
            optim: AdamW::new(config.lr, config.weight_decay),
            reference: reference.map(|r| r.params),
            config,
            model,
            step: 0,
            train,
            val,
        })
    }

    /// Restores the model, optimizer moments and step from a checkpoint.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let model = FlowModel::from_checkpoint(self.model.config.clone(), ck)?;
        if model.has_control() != self.model.has_control() {
            return Err(Error::Contract("checkpoint does not match this phase".into()));
        }
        self.model = model;
        self.optim.restore(&ck.records, ck.step);
        self.step = ck.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.config.seed, self.step);
        ck.records.extend(self.optim.records());
        ck
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    fn steered(&self) -> bool {
        self.config.phase != Phase::BasePretrain
    }

    fn assemble(&self, picks: &[&Example], rng: &mut impl Rng, dropout: f64) -> Result<Assembled> {
        let cfg = &self.model.config;
        let b = picks.len();
        let (tok, lat) = (cfg.tokens(), cfg.latent_dim());
        let mut t = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b * tok * lat);
        let mut instr = Vec::with_capacity(b);
        for e in picks {
            t.push(sample_timestep(self.config.t_mean, self.config.t_std, rng));
            eps.extend((0..tok * lat).map(|_| rng.sample::<f32, _>(StandardNormal)));
            let drop = dropout > 0.0 && rng.random_bool(dropout);
            instr.push(if drop { NULL_TOKENS } else { e.instr });
        }
        let lat_shape = vec![b, tok, lat];
        let cat = |f: &dyn Fn(&Example) -> &Vec<f32>, shape: Vec<usize>| -> Result<Tensor<f32>> {
            Tensor::new(shape, picks.iter().flat_map(|e| f(e).iter().copied()).collect())
        };
        let image = cat(&|e| &e.image, vec![b, cfg.image_tokens(), cfg.image_dim()])?;
        let eps = Tensor::new(lat_shape.clone(), eps)?;
        let masks = |get: &dyn Fn(&Example) -> Option<&Vec<f32>>, width: usize| -> Result<Option<Tensor<f32>>> {
            if cfg.stage == Stage::Geometry {
                return Ok(None);
            }
            let data: Option<Vec<f32>> = picks.iter().map(|e| get(e).cloned()).collect::<Option<Vec<_>>>().map(|v| v.concat());
            data.map(|d| Tensor::new(vec![b, tok, width], d)).transpose()
        };
        let instr = self.steered().then_some(instr);
        let p3 = cfg.patch_volume();
        let loss_mask = |m: &Option<Tensor<f32>>| -> Option<Tensor<f32>> {
            m.as_ref().map(|m| {
                let data = m.data().chunks(p3).flat_map(|c| c.repeat(3)).collect();
                Tensor::new(vec![b, tok, lat], data).expect("mask shape")
            })
        };
        let pos_mask = masks(&|e| e.mask.as_ref(), p3)?;
        let pos = FlowBatch {
            x0: cat(&|e| &e.x0, lat_shape.clone())?,
            eps: eps.clone(),
            t: t.clone(),
            image: image.clone(),
            mask: pos_mask.clone(),
            loss_mask: loss_mask(&pos_mask),
            instr: instr.clone(),
        };
        let neg = if self.config.phase == Phase::Dpo {
            let negs: Vec<&Negative> = picks.iter().map(|e| e.neg.as_ref().expect("checked at setup")).collect();
            let gather = |f: &dyn Fn(&Negative) -> Option<&Vec<f32>>, width: usize| -> Result<Option<Tensor<f32>>> {
                if cfg.stage == Stage::Geometry {
                    return Ok(None);
                }
                let d: Vec<f32> = negs.iter().flat_map(|n| f(n).expect("texture negatives carry masks").iter().copied()).collect();
                Tensor::new(vec![b, tok, width], d).map(Some)
            };
            let neg_mask = gather(&|n| n.mask.as_ref(), p3)?;
            Some(FlowBatch {
                x0: Tensor::new(lat_shape, negs.iter().flat_map(|n| n.x0.iter().copied()).collect())?,
                eps,
                t,
                image,
                loss_mask: loss_mask(&neg_mask),
                mask: neg_mask,
                instr,
            })
        } else {
            None
        };
        Ok(Assembled { pos, neg, seed: 0 })
    }

    fn batch_for(&self, step: u64, micro: usize) -> Result<Assembled> {
        let index = step * self.config.accum as u64 + micro as u64;
        let seed = derive_seed(self.config.seed, stream::TRAIN, index);
        let mut rng = rng_from(seed);
        let picks: Vec<&Example> = (0..self.config.batch)
            .map(|_| &self.train[rng.random_range(0..self.train.len())])
            .collect();
        let mut a = self.assemble(&picks, &mut rng, self.config.effective_p_uncond())?;
        a.seed = seed;
        Ok(a)
    }

    fn loss_and_grads(&self, a: &Assembled) -> Result<(f64, GradMap<f32>)> {
        let mut g = Graph::new();
        let cfg = &self.model.config;
        let loss = match &a.neg {
            None => sft_loss(&mut g, &self.model.params, cfg, &a.pos)?,
            Some(neg) => {
                dpo_loss(&mut g, &self.model.params, self.reference.as_ref(), cfg, &a.pos, neg, self.config.beta, self.config.alpha)?
                    .loss
            }
        };
        let value = g.value(loss).item() as f64;
        let grads = g.backward_params(loss, &self.model.params)?;
        Ok((value, grads))
    }

    /// One optimizer update over `accum` micro-batches.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let accum = self.config.accum;
        let mut total = 0.0;
        let mut sum: Option<GradMap<f32>> = None;
        for micro in 0..accum {
            let a = self.batch_for(self.step, micro)?;
            let (loss, grads) = self.loss_and_grads(&a).map_err(|e| match e {
                Error::NumericFault(m) => Error::NumericFault(format!(
                    "step {} micro-batch {micro} (batch seed {:#x}): {m}",
                    self.step, a.seed
                )),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NumericFault(format!(
                    "non-finite loss at step {} (batch seed {:#x})",
                    self.step, a.seed
                )));
            }
            total += loss;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (k, g) in grads {
                        let dst = acc.get_mut(&k).expect("same parameter set");
                        for (x, y) in dst.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("accum >= 1");
        if accum > 1 {
            let s = 1.0 / accum as f32;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grads, self.config.clip);
        if !grad_norm.is_finite() {
            return Err(Error::NumericFault(format!("non-finite gradient norm at step {}", self.step)));
        }
        self.optim.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss: total / accum as f64,
            grad_norm,
            clipped_norm,
            lr: self.optim.lr,
            wall_ms: if self.config.deterministic {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        })
    }

    /// Loss on a fixed validation batch (fixed noise and timesteps).
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let n = self.val.len().min(self.config.val_batch.max(1));
        let picks: Vec<&Example> = self.val[..n].iter().collect();
        let mut rng = stream_rng(self.config.seed, "validation", 0);
        let a = self.assemble(&picks, &mut rng, 0.0)?;
        let mut g = Graph::inference();
        let cfg = &self.model.config;
        let loss = match &a.neg {
            None => sft_loss(&mut g, &self.model.params, cfg, &a.pos)?,
            Some(neg) => {
                dpo_loss(&mut g, &self.model.params, self.reference.as_ref(), cfg, &a.pos, neg, self.config.beta, self.config.alpha)?
                    .loss
            }
        };
        Ok(Some(g.value(loss).item() as f64))
    }

    pub fn base_checksum(&self) -> u64 {
        self.model.params.checksum(ParamSet::Base)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Where metrics and checkpoints go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Model shape for a fresh base model; derived from the data otherwise.
    pub model_config: Option<ModelConfig>,
    /// Starting weights (required for sft and dpo).
    pub init: Option<FlowModel>,
    /// DPO reference; defaults to `init`.
    pub reference: Option<FlowModel>,
    /// Continue from this trainer checkpoint.
    pub resume: Option<PathBuf>,
    /// Print progress every this many steps (0 = silent).
    pub log_every: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub metrics: Vec<StepMetrics>,
    /// `(step, loss)` for each validation check, including step 0.
    pub validation: Vec<(u64, f64)>,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(phase: Phase, stage: Stage, step: u64) -> String {
    format!("{}-{}-{step:06}.vsck", phase.name(), stage.name())
}

fn append_metrics(path: &Path, config: &TrainConfig, rows: &[StepMetrics], fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
    let mut out = String::new();
    if fresh {
        out.push_str("step,phase,stage,loss,grad_norm,lr,wall_ms\n");
    }
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{:.8e},{:.8e},{:e},{}\n",
            m.step,
            config.phase.name(),
            config.stage.name(),
            m.loss,
            m.grad_norm,
            m.lr,
            m.wall_ms
        ));
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Runs a phase end to end: example preparation, the validation split,
/// training steps with periodic validation, metrics and checkpoints.
pub fn train_loop(config: &TrainConfig, records: &[EditPairRecord], opts: LoopOptions) -> Result<TrainOutcome> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let model_config = match (&opts.init, &opts.model_config) {
        (Some(m), _) => m.config.clone(),
        (None, Some(c)) => c.clone(),
        (None, None) => ModelConfig {
            grid: first.source.grid(),
            view: first.condition.width,
            ..ModelConfig::new(config.stage)
        },
    };
    let (train_recs, val_recs): (Vec<EditPairRecord>, Vec<EditPairRecord>) =
        records.iter().cloned().partition(|r| !validation_split(r.seed));
    let train = prepare_examples(config.phase, &model_config, &train_recs)?;
    let val = prepare_examples(config.phase, &model_config, &val_recs)?;
    let mut trainer = Trainer::new(config.clone(), opts.init, opts.reference, train, val, model_config)?;
    if let Some(path) = &opts.resume {
        let (_, ck) = FlowModel::load(path)?;
        trainer.restore(&ck)?;
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.csv"));
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut fresh = trainer.step == 0;
    let mut metrics = Vec::new();
    let mut validation = Vec::new();
    let mut pending = Vec::new();
    if let Some(v) = trainer.validation_loss()? {
        validation.push((trainer.step, v));
    }
    let mut last_ck = None;
    while trainer.step < config.steps {
        let m = trainer.train_step()?;
        if opts.log_every > 0 && m.step % opts.log_every == 0 {
            eprintln!("[{} {}] step {} loss {:.5} grad {:.3}", config.phase.name(), config.stage.name(), m.step, m.loss, m.grad_norm);
        }
        pending.push(m.clone());
        metrics.push(m);
        let step = trainer.step;
        if config.val_every > 0 && step % config.val_every == 0 {
            if let Some(v) = trainer.validation_loss()? {
                validation.push((step, v));
            }
        }
        let periodic = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if let (Some(dir), true) = (&opts.out_dir, periodic || step == config.steps) {
            if let Some(mp) = &metrics_path {
                append_metrics(mp, config, &pending, fresh)?;
                fresh = false;
                pending.clear();
            }
            let path = dir.join(checkpoint_name(config.phase, config.stage, step));
            trainer.model.save(&path, &trainer.checkpoint())?;
            last_ck = Some(path);
        }
    }
    if let (Some(mp), false) = (&metrics_path, pending.is_empty() && !fresh) {
        append_metrics(mp, config, &pending, fresh)?;
    }
    if let (Some(dir), None) = (&opts.out_dir, &last_ck) {
        let path = dir.join(checkpoint_name(config.phase, config.stage, trainer.step));
        trainer.model.save(&path, &trainer.checkpoint())?;
        last_ck = Some(path);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        validation,
        checkpoint: last_ck,
    })
}
