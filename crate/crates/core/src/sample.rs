//! Euler integration of the learned flow, guidance, and the two-stage
//! geometry-then-texture edit pipeline.

use crate::error::{Error, Result};
use crate::flow::{decode_occupancy, decode_texture, image_tokens, occupancy_tokens, FlowModel, Stage};
use crate::rng::{rng_from, stream, derive_seed};
use crate::tensor::Tensor;
use crate::voxel::{encode_instruction, Category, EditInstruction, InstrTokens, ViewImage, VoxelAsset};
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale; the unconditional branch is the base model.
    pub cfg_scale: f64,
    /// Apply guidance in the geometry stage too.
    pub cfg_geometry: bool,
    /// Steer the texture stage for addition and removal instructions too.
    pub steer_texture_always: bool,
    /// Steer the geometry stage for texture instructions too.
    pub steer_geometry_always: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            cfg_scale: 3.0,
            cfg_geometry: false,
            steer_texture_always: false,
            steer_geometry_always: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` (state `x1`) down to `t = 0`
/// on the uniform grid `t_k = k / steps`.
pub fn euler_integrate<F>(mut velocity: F, x1: Tensor<f32>, steps: usize) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
{
    if steps == 0 {
        return Err(Error::Contract("euler integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    // The state is carried in f64; the model sees its f32 rounding.
    let mut state: Vec<f64> = x1.data().iter().map(|&v| f64::from(v)).collect();
    let mut x = x1;
    for k in (1..=steps).rev() {
        let t = k as f64 * dt;
        let v = velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler-step", format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        for ((si, xi), &vi) in state.iter_mut().zip(x.data_mut()).zip(v.data()) {
            *si -= dt * f64::from(vi);
            *xi = *si as f32;
        }
        if !x.is_finite() {
            return Err(Error::Divergence { step: steps - k + 1 });
        }
    }
    Ok(x)
}

/// Standard-normal noise for one sample, fixed by `seed`.
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).expect("shape matches")
}

/// Samples `x(1) ~ N(0, I)` from `seed`, then integrates to `t = 0`.
pub fn euler_sample<F>(velocity: F, shape: &[usize], steps: usize, seed: u64) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
{
    euler_integrate(velocity, noise(shape, seed), steps)
}

/// `v_uncond + s (v_cond − v_uncond)`; exact at `s = 0` and `s = 1`.
pub fn cfg_velocity(v_uncond: &Tensor<f32>, v_cond: &Tensor<f32>, s: f64) -> Result<Tensor<f32>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::Contract(format!("guidance inputs {:?} vs {:?}", v_uncond.shape(), v_cond.shape())));
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    let sf = s as f32;
    let data = v_uncond.data().iter().zip(v_cond.data()).map(|(&u, &c)| u + sf * (c - u)).collect();
    Tensor::new(v_uncond.shape().to_vec(), data)
}

/// Occupancy from a geometry latent; the flag is set when nothing is occupied.
pub fn decode_geometry(latent: &[f32], g: usize, p: usize) -> Result<(Vec<u8>, bool)> {
    let occ = decode_occupancy(latent, g, p)?;
    let empty = occ.iter().all(|&o| o == 0);
    Ok((occ, empty))
}

/// Trained models for both stages.
#[derive(Clone, Debug)]
pub struct EditModels {
    pub geometry: FlowModel,
    pub texture: FlowModel,
}

/// One edit request. `instruction = None` is plain image-to-3D.
#[derive(Clone, Debug)]
pub struct EditRequest<'a> {
    pub condition: &'a ViewImage,
    pub instruction: Option<EditInstruction>,
    /// Seed of this request's noise; independent of batching.
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub geometry_ms: f64,
    pub texture_ms: f64,
}

/// Guidance setting of one stage for one request.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Steer {
    Off,
    On(InstrTokens, f64),
}

fn run_stage(
    model: &FlowModel,
    images: &Tensor<f32>,
    masks: Option<&Tensor<f32>>,
    steer: &[Steer],
    seeds: &[u64],
    steps: usize,
) -> Result<Tensor<f32>> {
    let cfg = &model.config;
    let b = seeds.len();
    let (tok, lat) = (cfg.tokens(), cfg.latent_dim());
    let mut x1 = Vec::with_capacity(b * tok * lat);
    for &s in seeds {
        x1.extend_from_slice(noise(&[tok, lat], s).data());
    }
    let x1 = Tensor::new(vec![b, tok, lat], x1)?;
    let scale = match steer.first() {
        Some(Steer::On(_, s)) => Some(*s),
        _ => None,
    };
    let tokens: Vec<InstrTokens> = steer
        .iter()
        .map(|s| match s {
            Steer::On(t, _) => *t,
            Steer::Off => [0; 4],
        })
        .collect();
    euler_integrate(
        |x, t| {
            let ts = vec![t; b];
            match scale {
                None => model.velocity_base(x, &ts, images, masks),
                Some(1.0) => model.velocity_steered(x, &ts, images, masks, &tokens),
                Some(0.0) => model.velocity_base(x, &ts, images, masks),
                Some(s) => {
                    let u = model.velocity_base(x, &ts, images, masks)?;
                    let c = model.velocity_steered(x, &ts, images, masks, &tokens)?;
                    cfg_velocity(&u, &c, s)
                }
            }
        },
        x1,
        steps,
    )
}

/// Runs `f` over groups of requests sharing the same steering mode and
/// scatters the per-request rows back in order.
fn grouped<F>(modes: &[Steer], latent_len: usize, mut f: F) -> Result<Vec<Vec<f32>>>
where
    F: FnMut(&[usize], &[Steer]) -> Result<Tensor<f32>>,
{
    let mut out = vec![Vec::new(); modes.len()];
    let mut keys: Vec<Option<u64>> = Vec::new();
    for m in modes {
        let k = match m {
            Steer::Off => None,
            Steer::On(_, s) => Some(s.to_bits()),
        };
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for key in keys {
        let idx: Vec<usize> = (0..modes.len())
            .filter(|&i| match modes[i] {
                Steer::Off => key.is_none(),
                Steer::On(_, s) => key == Some(s.to_bits()),
            })
            .collect();
        let sub: Vec<Steer> = idx.iter().map(|&i| modes[i]).collect();
        let res = f(&idx, &sub)?;
        for (row, &i) in res.data().chunks(latent_len).zip(&idx) {
            out[i] = row.to_vec();
        }
    }
    Ok(out)
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let row = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, idx.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].iter().copied()).collect())
}

/// Result of one request in [`edit_assets`].
pub type EditResult = Result<VoxelAsset>;

/// Batched two-stage edit. Geometry is steered for addition and removal
/// instructions and sampled from the base for texture instructions; colors
/// are steered for texture instructions. Requests whose geometry comes out
/// empty fail with a degenerate-output error.
pub fn edit_assets(requests: &[EditRequest<'_>], models: &EditModels, cfg: &SamplerConfig) -> Result<(Vec<EditResult>, StageTimings)> {
    cfg.validate()?;
    if requests.is_empty() {
        return Ok((Vec::new(), StageTimings::default()));
    }
    let (gm, tm) = (&models.geometry, &models.texture);
    if gm.config.stage != Stage::Geometry || tm.config.stage != Stage::Texture {
        return Err(Error::Contract("edit models must be a geometry and a texture model".into()));
    }
    if gm.config.grid != tm.config.grid {
        return Err(Error::Contract("geometry and texture models disagree on the grid".into()));
    }
    let g = gm.config.grid;
    let mut geo_modes = Vec::with_capacity(requests.len());
    let mut tex_modes = Vec::with_capacity(requests.len());
    for r in requests {
        let (geo, tex) = match r.instruction {
            None => (Steer::Off, Steer::Off),
            Some(instr) => {
                let tokens = encode_instruction(&instr)?;
                let texture = instr.category() == Category::Texture;
                let geo_scale = if cfg.cfg_geometry { cfg.cfg_scale } else { 1.0 };
                let geo = if !texture || cfg.steer_geometry_always { Steer::On(tokens, geo_scale) } else { Steer::Off };
                let tex = if texture || cfg.steer_texture_always { Steer::On(tokens, cfg.cfg_scale) } else { Steer::Off };
                (geo, tex)
            }
        };
        geo_modes.push(geo);
        tex_modes.push(tex);
    }
    let needs = |modes: &[Steer], m: &FlowModel| modes.iter().any(|s| matches!(s, Steer::On(..))) && !m.has_control();
    if needs(&geo_modes, gm) {
        return Err(Error::MissingPrerequisite("geometry steering needs a geometry sft checkpoint".into()));
    }
    if needs(&tex_modes, tm) {
        return Err(Error::MissingPrerequisite("texture steering needs a texture sft checkpoint".into()));
    }
    let conds: Vec<&ViewImage> = requests.iter().map(|r| r.condition).collect();
    let seeds_for = |stage: &str| -> Vec<u64> { requests.iter().map(|r| derive_seed(r.seed, stage, 0)).collect() };

    let start = Instant::now();
    let gimg = image_tokens::<f32>(&conds, &gm.config)?;
    let gseeds = seeds_for("geometry");
    let geo_len = gm.config.tokens() * gm.config.latent_dim();
    let geo = grouped(&geo_modes, geo_len, |idx, modes| {
        let seeds: Vec<u64> = idx.iter().map(|&i| gseeds[i]).collect();
        run_stage(gm, &gather(&gimg, idx)?, None, modes, &seeds, cfg.steps)
    })?;
    let geometry_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut occupancies = Vec::with_capacity(requests.len());
    for lat in &geo {
        occupancies.push(decode_geometry(lat, g, gm.config.patch)?);
    }
    let live: Vec<usize> = (0..requests.len()).filter(|&i| !occupancies[i].1).collect();

    let start = Instant::now();
    let mut results: Vec<EditResult> = occupancies
        .iter()
        .map(|(_, empty)| {
            if *empty {
                Err(Error::DegenerateOutput("generated geometry is empty".into()))
            } else {
                Ok(VoxelAsset::empty(g))
            }
        })
        .collect();
    if !live.is_empty() {
        let tc = &tm.config;
        let live_conds: Vec<&ViewImage> = live.iter().map(|&i| conds[i]).collect();
        let timg = image_tokens::<f32>(&live_conds, tc)?;
        let mut mask = Vec::new();
        for &i in &live {
            mask.extend(occupancy_tokens(&occupancies[i].0, g, tc.patch)?);
        }
        let mask = Tensor::new(vec![live.len(), tc.tokens(), tc.patch_volume()], mask)?;
        let tseeds = seeds_for("texture");
        let modes: Vec<Steer> = live.iter().map(|&i| tex_modes[i]).collect();
        let tex_len = tc.tokens() * tc.latent_dim();
        let tex = grouped(&modes, tex_len, |idx, sub| {
            let seeds: Vec<u64> = idx.iter().map(|&j| tseeds[live[j]]).collect();
            run_stage(tm, &gather(&timg, idx)?, Some(&gather(&mask, idx)?), sub, &seeds, cfg.steps)
        })?;
        for (j, &i) in live.iter().enumerate() {
            results[i] = decode_texture(&tex[j], &occupancies[i].0, g, tc.patch);
        }
    }
    let texture_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((results, StageTimings { geometry_ms, texture_ms }))
}

/// Single-request convenience wrapper around [`edit_assets`].
pub fn edit_asset(
    condition: &ViewImage,
    instruction: Option<EditInstruction>,
    models: &EditModels,
    cfg: &SamplerConfig,
) -> Result<(VoxelAsset, StageTimings)> {
    let req = EditRequest {
        condition,
        instruction,
        seed: derive_seed(cfg.seed, stream::SAMPLE, 0),
    };
    let (mut res, timings) = edit_assets(&[req], models, cfg)?;
    res.pop().expect("one result").map(|a| (a, timings))
}
