//! Base pretraining, supervised steering and preference finetuning.

mod optim;
mod trainer;

pub use optim::{clip_grad_norm, AdamW};
pub use trainer::{
    prepare_examples, train_loop, validation_split, Example, LoopOptions, StepMetrics, TrainOutcome,
    Trainer,
};

use crate::error::{Error, Result};
use crate::flow::{forward, CondVars, ModelConfig, Stage};
use crate::tensor::{Graph, ParameterStore, Scalar, Tensor, Var};
use crate::voxel::InstrTokens;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Image-to-3D training of the base model, no instructions.
    BasePretrain,
    /// Supervised flow matching of the control branch.
    Sft,
    /// Preference finetuning of the control branch.
    Dpo,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::BasePretrain, Phase::Sft, Phase::Dpo];

    pub fn name(self) -> &'static str {
        match self {
            Phase::BasePretrain => "base-pretrain",
            Phase::Sft => "sft",
            Phase::Dpo => "dpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub stage: Stage,
    pub lr: f64,
    pub batch: usize,
    pub accum: usize,
    pub clip: f64,
    pub t_mean: f64,
    pub t_std: f64,
    pub p_uncond: f64,
    pub beta: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    /// Validation cadence in steps (0 disables).
    pub val_every: u64,
    /// Validation examples evaluated per check.
    pub val_batch: usize,
    /// Checkpoint cadence in steps (0 writes only the final checkpoint).
    pub checkpoint_every: u64,
    /// Permits preference finetuning of the geometry stage.
    pub allow_geometry_dpo: bool,
    /// Zeroes wall-clock fields so outputs are byte-reproducible.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Defaults for a phase and stage; finetuning rates follow the
    /// published schedule, base pretraining uses a from-scratch rate.
    pub fn new(phase: Phase, stage: Stage) -> Self {
        let (lr, accum, t_std, p_uncond) = match (phase, stage) {
            (Phase::BasePretrain, _) => (2e-3, 1, 1.0, 0.0),
            (Phase::Sft, Stage::Geometry) => (2e-5, 2, 1.8, 0.0),
            (Phase::Sft, Stage::Texture) => (5e-5, 1, 1.0, 0.2),
            (Phase::Dpo, _) => (1e-6, 2, 1.0, 0.0),
        };
        Self {
            phase,
            stage,
            lr,
            batch: 8,
            accum,
            clip: 1.0,
            t_mean: 1.0,
            t_std,
            p_uncond,
            beta: 0.2,
            alpha: 1.0,
            weight_decay: 0.01,
            steps: if phase == Phase::Dpo { 500 } else { 2000 },
            seed: 0,
            val_every: 200,
            val_batch: 16,
            checkpoint_every: 0,
            allow_geometry_dpo: false,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch == 0 || self.accum == 0 {
            return bad("batch and accumulation must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip));
        }
        if !(self.t_std > 0.0) {
            return bad(format!("timestep std {} must be positive", self.t_std));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond {} outside [0, 1)", self.p_uncond));
        }
        if self.phase == Phase::Dpo && !(self.beta > 0.0) {
            return bad(format!("DPO beta {} must be positive", self.beta));
        }
        if self.alpha < 0.0 || self.weight_decay < 0.0 {
            return bad("alpha and weight decay must be non-negative".into());
        }
        Ok(())
    }

    /// Instruction dropout in effect: only texture SFT drops instructions.
    pub fn effective_p_uncond(&self) -> f64 {
        match (self.phase, self.stage) {
            (Phase::Sft, Stage::Texture) => self.p_uncond,
            _ => 0.0,
        }
    }
}

/// `t = sigmoid(z)`, `z ~ N(mean, std²)`, kept inside the open unit interval.
pub fn sample_timestep(mean: f64, std: f64, rng: &mut impl Rng) -> f64 {
    let z = Normal::new(mean, std).expect("std is positive").sample(rng);
    (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7)
}

/// `x_t = (1 - t) x₀ + t ε`. `t` holds one value per leading index of the
/// tensors, or a single value shared by all.
pub fn noise_latent<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Contract(format!("x0 {:?} vs noise {:?}", x0.shape(), eps.shape())));
    }
    let groups = match t.len() {
        1 => 1,
        n if x0.rank() > 0 && x0.shape()[0] == n => n,
        n => return Err(Error::Contract(format!("{n} timesteps for shape {:?}", x0.shape()))),
    };
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("timestep {bad} outside [0, 1]")));
    }
    let inner = x0.numel() / groups;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&a, &e))| {
            let tv = t[i / inner];
            T::cst((1.0 - tv) * a.f64() + tv * e.f64())
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One flow-matching batch. Latents are `[B, T, latent_dim]`.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<f64>,
    /// Condition image tokens `[B, image_tokens, image_dim]`.
    pub image: Tensor<T>,
    /// Texture stage: occupancy tokens `[B, T, p³]`.
    pub mask: Option<Tensor<T>>,
    /// Texture stage: which latent entries enter the loss, `[B, T, latent_dim]`.
    pub loss_mask: Option<Tensor<T>>,
    /// Steering tokens; `None` runs the base model alone.
    pub instr: Option<Vec<InstrTokens>>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> FlowBatch<U> {
        FlowBatch {
            x0: self.x0.cast(),
            eps: self.eps.cast(),
            t: self.t.clone(),
            image: self.image.cast(),
            mask: self.mask.as_ref().map(|m| m.cast()),
            loss_mask: self.loss_mask.as_ref().map(|m| m.cast()),
            instr: self.instr.clone(),
        }
    }
}

/// Squared velocity error per sample, `[B]`, averaged over the loss mask.
pub fn per_sample_error<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    batch: &FlowBatch<T>,
) -> Result<Var> {
    let b = batch.len();
    let x_t = g.constant(noise_latent(&batch.x0, &batch.eps, &batch.t)?)?;
    let target: Vec<T> = batch.eps.data().iter().zip(batch.x0.data()).map(|(&e, &x)| e - x).collect();
    let target = g.constant(Tensor::new(batch.x0.shape().to_vec(), target)?)?;
    let image = g.constant(batch.image.clone())?;
    let mask = batch.mask.as_ref().map(|m| g.constant(m.clone())).transpose()?;
    if cfg.stage == Stage::Texture && batch.loss_mask.is_none() {
        return Err(Error::Contract("texture loss needs an occupancy loss mask".into()));
    }
    let v = forward(g, params, cfg, x_t, &batch.t, CondVars { image, mask }, batch.instr.as_deref())?;
    let d = g.sub(v, target)?;
    let mut sq = g.square(d)?;
    let per = batch.x0.numel() / b.max(1);
    let counts: Vec<f64> = match &batch.loss_mask {
        Some(m) => {
            let mv = g.constant(m.clone())?;
            sq = g.mul(sq, mv)?;
            m.data().chunks(per).map(|c| c.iter().map(|v| v.f64()).sum()).collect()
        }
        None => vec![per as f64; b],
    };
    if let Some(i) = counts.iter().position(|&c| c <= 0.0) {
        return Err(Error::Contract(format!("sample {i} has an empty loss mask")));
    }
    let sums = g.sum_keep(sq, 1)?;
    let inv = Tensor::new(vec![b], counts.iter().map(|c| T::cst(1.0 / c)).collect())?;
    let inv = g.constant(inv)?;
    g.mul(sums, inv)
}

/// Flow-matching loss `E‖v(x_t, t) − (ε − x₀)‖²`, masked per sample and
/// averaged over the batch.
pub fn sft_loss<T: Scalar>(g: &mut Graph<T>, params: &ParameterStore<T>, cfg: &ModelConfig, batch: &FlowBatch<T>) -> Result<Var> {
    let e = per_sample_error(g, params, cfg, batch)?;
    g.mean(e)
}

/// Handles to the pieces of a DPO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DpoTerms {
    pub loss: Var,
    /// `−log σ(arg)` averaged over the batch.
    pub pairwise: Var,
    /// Pre-sigmoid value per pair, `[B]`.
    pub arg: Var,
    /// Supervised loss on the positive sample.
    pub sft: Var,
}

/// Preference loss for flow matching. `pos` and `neg` must share `ε`, `t`,
/// the condition and the instruction; the reference model is evaluated
/// without gradient tracking.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParameterStore<T>,
    reference: Option<&ParameterStore<T>>,
    cfg: &ModelConfig,
    pos: &FlowBatch<T>,
    neg: &FlowBatch<T>,
    beta: f64,
    alpha: f64,
) -> Result<DpoTerms> {
    let reference = reference.ok_or_else(|| Error::Contract("DPO needs a reference model".into()))?;
    if pos.t != neg.t || pos.eps.data() != neg.eps.data() || pos.instr != neg.instr {
        return Err(Error::Contract("DPO pair must share noise, timestep and instruction".into()));
    }
    let ref_err = |batch: &FlowBatch<T>| -> Result<Vec<T>> {
        let mut rg = Graph::inference();
        let e = per_sample_error(&mut rg, reference, cfg, batch)?;
        Ok(rg.value(e).data().to_vec())
    };
    let (rp, rn) = (ref_err(pos)?, ref_err(neg)?);
    let ref_gap: Vec<T> = rp.iter().zip(&rn).map(|(&a, &b)| a - b).collect();
    let e_pos = per_sample_error(g, params, cfg, pos)?;
    let e_neg = per_sample_error(g, params, cfg, neg)?;
    let gap = g.sub(e_pos, e_neg)?;
    let ref_gap = g.constant(Tensor::new(vec![ref_gap.len()], ref_gap)?)?;
    let inside = g.sub(gap, ref_gap)?;
    let arg = g.mul_scalar(inside, -beta / 2.0)?;
    let ls = g.log_sigmoid(arg)?;
    let mean_ls = g.mean(ls)?;
    let pairwise = g.mul_scalar(mean_ls, -1.0)?;
    let sft = g.mean(e_pos)?;
    let reg = g.mul_scalar(sft, alpha)?;
    let loss = g.add(pairwise, reg)?;
    Ok(DpoTerms { loss, pairwise, arg, sft })
}

#[cfg(test)]
mod tests;
