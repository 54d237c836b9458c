use super::*;
use crate::data::{generate_records, DataConfig};
use crate::flow::{image_tokens, FlowModel};
use crate::rng::rng_from;
use crate::tensor::{grad_check, GradCheckOptions, ParamSet};
use crate::voxel::{build_asset, render_ortho, SceneGraph, View, ViewImage, VOCAB_SIZE};
use rand_distr::StandardNormal;

fn tiny(stage: Stage) -> ModelConfig {
    ModelConfig {
        grid: 8,
        patch: 4,
        width: 8,
        heads: 2,
        blocks: 1,
        view: 8,
        image_patch: 4,
        vocab: VOCAB_SIZE,
        stage,
    }
}

fn gauss(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// A steered model in f64 with every parameter perturbed away from its
/// initial value so that zero-initialized weights carry gradient.
fn steered_f64(cfg: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut m = FlowModel::init_base(cfg.clone(), seed).unwrap();
    m.init_control(seed).unwrap();
    let mut p = m.params.cast::<f64>();
    let mut rng = rng_from(seed ^ 0x55);
    for par in p.iter_mut() {
        for v in par.value.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

fn batch(cfg: &ModelConfig, b: usize, seed: u64, steer: bool) -> FlowBatch<f64> {
    let mut rng = rng_from(seed);
    let assets: Vec<_> = (0..b).map(|i| build_asset(&SceneGraph::generate(seed + i as u64), cfg.grid).unwrap()).collect();
    let imgs: Vec<ViewImage> = assets.iter().map(|a| render_ortho(a, View::Front, cfg.view)).collect();
    let refs: Vec<&ViewImage> = imgs.iter().collect();
    let shape = [b, cfg.tokens(), cfg.latent_dim()];
    let (mask, loss_mask) = match cfg.stage {
        Stage::Geometry => (None, None),
        Stage::Texture => {
            let m: Vec<f64> = (0..b * cfg.tokens() * cfg.patch_volume()).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
            let lm: Vec<f64> = m.chunks(cfg.patch_volume()).flat_map(|c| c.repeat(3)).collect();
            (
                Some(Tensor::new(vec![b, cfg.tokens(), cfg.patch_volume()], m).unwrap()),
                Some(Tensor::new(shape.to_vec(), lm).unwrap()),
            )
        }
    };
    FlowBatch {
        x0: gauss(&mut rng, &shape, 1.0),
        eps: gauss(&mut rng, &shape, 1.0),
        t: (0..b).map(|_| rng.random_range(0.05..0.95)).collect(),
        image: image_tokens(&refs, cfg).unwrap(),
        mask,
        loss_mask,
        instr: steer.then(|| (0..b).map(|i| [1 + i as u16, 5, 9, 12]).collect()),
    }
}

#[test]
fn timestep_distribution_matches_logit_normal() {
    let mut rng = rng_from(1);
    let n = 20_000;
    let mut s: Vec<f64> = (0..n).map(|_| sample_timestep(1.0, 1.0, &mut rng)).collect();
    assert!(s.iter().all(|&t| t > 0.0 && t < 1.0));
    s.sort_by(f64::total_cmp);
    // Median of sigmoid(N(1, ·)) is sigmoid(1).
    let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((s[n / 2] - sig1).abs() < 0.01, "median {}", s[n / 2]);
    let low = |std: f64| {
        let mut rng = rng_from(2);
        (0..n).filter(|_| sample_timestep(1.0, std, &mut rng) < 0.1).count()
    };
    assert!(low(1.8) > low(1.0));
}

#[test]
fn noise_latent_endpoints_and_midpoint() {
    let mut rng = rng_from(3);
    let x0 = gauss(&mut rng, &[2, 3], 1.0);
    let eps = gauss(&mut rng, &[2, 3], 1.0);
    assert_eq!(noise_latent(&x0, &eps, &[0.0]).unwrap(), x0);
    assert_eq!(noise_latent(&x0, &eps, &[1.0]).unwrap(), eps);
    let mixed = noise_latent(&x0, &eps, &[0.0, 1.0]).unwrap();
    assert_eq!(&mixed.data()[..3], &x0.data()[..3]);
    assert_eq!(&mixed.data()[3..], &eps.data()[3..]);
    let mid = noise_latent(&x0, &eps, &[0.5]).unwrap();
    for ((m, a), e) in mid.data().iter().zip(x0.data()).zip(eps.data()) {
        assert!((m - 0.5 * (a + e)).abs() < 1e-15);
    }
    assert!(noise_latent(&x0, &eps, &[1.5]).is_err());
    assert!(noise_latent(&x0, &eps, &[0.1, 0.2, 0.3]).is_err());
}

#[test]
fn sft_loss_closed_forms() {
    // A fresh base model has a zero output layer, so v ≡ 0 and the loss is
    // the mean of ‖ε − x₀‖² over the latent.
    let cfg = tiny(Stage::Geometry);
    let p = FlowModel::init_base(cfg.clone(), 4).unwrap().params.cast::<f64>();
    let b = batch(&cfg, 3, 5, false);
    let mut g = Graph::inference();
    let l = sft_loss(&mut g, &p, &cfg, &b).unwrap();
    let per = b.x0.numel() / 3;
    let expect: f64 = (0..3)
        .map(|i| {
            (0..per).map(|j| (b.eps.data()[i * per + j] - b.x0.data()[i * per + j]).powi(2)).sum::<f64>() / per as f64
        })
        .sum::<f64>()
        / 3.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);

    // With x₀ = ε the oracle velocity is zero, which the fresh model outputs.
    let mut b0 = b.clone();
    b0.x0 = b0.eps.clone();
    let mut g = Graph::inference();
    let l = sft_loss(&mut g, &p, &cfg, &b0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn sft_loss_is_permutation_invariant() {
    let cfg = tiny(Stage::Texture);
    let p = steered_f64(&cfg, 6);
    let b = batch(&cfg, 3, 7, true);
    let order = [2usize, 0, 1];
    let permute = |t: &Tensor<f64>| {
        let row = t.numel() / 3;
        Tensor::new(t.shape().to_vec(), order.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].to_vec()).collect()).unwrap()
    };
    let pb = FlowBatch {
        x0: permute(&b.x0),
        eps: permute(&b.eps),
        t: order.iter().map(|&i| b.t[i]).collect(),
        image: permute(&b.image),
        mask: b.mask.as_ref().map(permute),
        loss_mask: b.loss_mask.as_ref().map(permute),
        instr: b.instr.as_ref().map(|v| order.iter().map(|&i| v[i]).collect()),
    };
    let eval = |bb: &FlowBatch<f64>| {
        let mut g = Graph::inference();
        let l = sft_loss(&mut g, &p, &cfg, bb).unwrap();
        g.value(l).item()
    };
    assert!((eval(&b) - eval(&pb)).abs() < 1e-12);
}

#[test]
fn dpo_pairwise_term_is_ln2_when_model_equals_reference() {
    let cfg = tiny(Stage::Texture);
    let p = steered_f64(&cfg, 8);
    let pos = batch(&cfg, 2, 9, true);
    let mut neg = pos.clone();
    neg.x0 = batch(&cfg, 2, 10, true).x0;
    let mut g = Graph::inference();
    let terms = dpo_loss(&mut g, &p, Some(&p), &cfg, &pos, &neg, 0.2, 1.0).unwrap();
    assert!((g.value(terms.pairwise).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let total = g.value(terms.loss).item();
    assert!((total - std::f64::consts::LN_2 - g.value(terms.sft).item()).abs() < 1e-12);
}

#[test]
fn dpo_argument_scales_with_beta_and_needs_reference() {
    let cfg = tiny(Stage::Texture);
    let p = steered_f64(&cfg, 11);
    let r = steered_f64(&cfg, 12);
    let pos = batch(&cfg, 2, 13, true);
    let mut neg = pos.clone();
    neg.x0 = batch(&cfg, 2, 14, true).x0;
    let arg = |beta: f64| {
        let mut g = Graph::inference();
        let t = dpo_loss(&mut g, &p, Some(&r), &cfg, &pos, &neg, beta, 1.0).unwrap();
        g.value(t.arg).data().to_vec()
    };
    let (a1, a2) = (arg(0.2), arg(0.4));
    for (x, y) in a1.iter().zip(&a2) {
        assert!((2.0 * x - y).abs() < 1e-12 * (1.0 + y.abs()));
    }
    let mut g = Graph::inference();
    assert!(dpo_loss(&mut g, &p, None, &cfg, &pos, &neg, 0.2, 1.0).is_err());
    let mut other = neg.clone();
    other.t[0] *= 0.5;
    assert!(dpo_loss(&mut g, &p, Some(&r), &cfg, &pos, &other, 0.2, 1.0).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let opts = GradCheckOptions {
        max_per_param: Some(4),
        ..GradCheckOptions::default()
    };
    for stage in [Stage::Geometry, Stage::Texture] {
        let cfg = tiny(stage);
        let p = steered_f64(&cfg, 15);
        let b = batch(&cfg, 2, 16, true);
        let rep = grad_check(&p, |g, s| sft_loss(g, s, &cfg, &b), &opts).unwrap();
        assert!(rep.passed, "sft {stage:?}: {}", rep.max_rel_error);

        let r = steered_f64(&cfg, 17);
        let mut neg = b.clone();
        neg.x0 = batch(&cfg, 2, 18, true).x0;
        let rep = grad_check(&p, |g, s| Ok(dpo_loss(g, s, Some(&r), &cfg, &b, &neg, 0.2, 1.0)?.loss), &opts).unwrap();
        assert!(rep.passed, "dpo {stage:?}: {}", rep.max_rel_error);
    }
}

fn records(n: usize, seed: u64) -> Vec<crate::data::EditPairRecord> {
    let cfg = DataConfig {
        pairs: n,
        grid: 8,
        view_size: 8,
        q: 0.0,
        seed,
        ..DataConfig::default()
    };
    generate_records(&cfg).unwrap().records
}

fn small_train(phase: Phase, stage: Stage) -> TrainConfig {
    TrainConfig {
        batch: 4,
        steps: 3,
        val_every: 0,
        ..TrainConfig::new(phase, stage)
    }
}

fn examples(phase: Phase, cfg: &ModelConfig, recs: &[crate::data::EditPairRecord]) -> Vec<Example> {
    prepare_examples(phase, cfg, recs).unwrap()
}

#[test]
fn clipping_bounds_the_update_norm() {
    let recs = records(40, 19);
    let cfg = tiny(Stage::Geometry);
    let mut tc = small_train(Phase::BasePretrain, Stage::Geometry);
    tc.clip = 1e-3;
    let mut tr = Trainer::new(tc, None, None, examples(Phase::BasePretrain, &cfg, &recs), vec![], cfg).unwrap();
    for _ in 0..3 {
        let m = tr.train_step().unwrap();
        assert!(m.clipped_norm <= 1e-3 * (1.0 + 1e-5), "{m:?}");
        assert!(m.grad_norm >= m.clipped_norm);
    }
}

#[test]
fn training_is_reproducible_and_keeps_base_frozen() {
    let recs = records(60, 20);
    let cfg = tiny(Stage::Texture);
    let run = || {
        let base = FlowModel::init_base(cfg.clone(), 21).unwrap();
        let mut tr = Trainer::new(
            small_train(Phase::Sft, Stage::Texture),
            Some(base),
            None,
            examples(Phase::Sft, &cfg, &recs),
            vec![],
            cfg.clone(),
        )
        .unwrap();
        let before = tr.base_checksum();
        let losses: Vec<u64> = (0..3).map(|_| tr.train_step().unwrap().loss.to_bits()).collect();
        assert_eq!(before, tr.base_checksum());
        assert!(tr.model.params.iter().any(|p| p.set == ParamSet::Control));
        losses
    };
    assert_eq!(run(), run());
}

#[test]
fn phase_order_is_enforced() {
    let recs = records(40, 22);
    let cfg = tiny(Stage::Geometry);
    let ex = examples(Phase::Sft, &cfg, &recs);
    let err = Trainer::new(small_train(Phase::Sft, Stage::Geometry), None, None, ex.clone(), vec![], cfg.clone()).err().unwrap();
    assert!(matches!(err, crate::error::Error::MissingPrerequisite(_)));

    let mut steered = FlowModel::init_base(cfg.clone(), 23).unwrap();
    steered.init_control(23).unwrap();
    let dpo_ex = examples(Phase::Dpo, &cfg, &recs);
    let err = Trainer::new(small_train(Phase::Dpo, Stage::Geometry), Some(steered.clone()), None, dpo_ex.clone(), vec![], cfg.clone())
        .err()
        .unwrap();
    assert!(matches!(err, crate::error::Error::Config(_)));
    let mut tc = small_train(Phase::Dpo, Stage::Geometry);
    tc.allow_geometry_dpo = true;
    assert!(Trainer::new(tc, Some(steered), None, dpo_ex.clone(), vec![], cfg.clone()).is_ok());

    let base = FlowModel::init_base(cfg.clone(), 24).unwrap();
    let mut tc = small_train(Phase::Dpo, Stage::Geometry);
    tc.allow_geometry_dpo = true;
    let err = Trainer::new(tc, Some(base), None, dpo_ex, vec![], cfg).err().unwrap();
    assert!(matches!(err, crate::error::Error::MissingPrerequisite(_)));
}

#[test]
fn resume_reproduces_the_next_step() {
    let recs = records(60, 25);
    let cfg = tiny(Stage::Geometry);
    let ex = examples(Phase::BasePretrain, &cfg, &recs);
    let tc = small_train(Phase::BasePretrain, Stage::Geometry);
    let mut a = Trainer::new(tc.clone(), None, None, ex.clone(), vec![], cfg.clone()).unwrap();
    a.train_step().unwrap();
    a.train_step().unwrap();
    let ck = a.checkpoint();
    let next = a.train_step().unwrap();

    let mut b = Trainer::new(tc, None, None, ex, vec![], cfg).unwrap();
    b.restore(&ck).unwrap();
    let resumed = b.train_step().unwrap();
    assert_eq!(next.loss.to_bits(), resumed.loss.to_bits());
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn train_loop_writes_metrics_and_checkpoint() {
    let recs = records(40, 26);
    let dir = tempfile::tempdir().unwrap();
    let mut tc = small_train(Phase::BasePretrain, Stage::Geometry);
    tc.val_every = 2;
    let out = train_loop(
        &tc,
        &recs,
        LoopOptions {
            out_dir: Some(dir.path().to_path_buf()),
            model_config: Some(tiny(Stage::Geometry)),
            ..LoopOptions::default()
        },
    )
    .unwrap();
    assert_eq!(out.metrics.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,phase,stage,loss,grad_norm,lr,wall_ms"));
    let ck = out.checkpoint.unwrap();
    let (m, c) = FlowModel::load(&ck).unwrap();
    assert_eq!(c.step, 3);
    assert_eq!(m.params, out.model.params);
}

