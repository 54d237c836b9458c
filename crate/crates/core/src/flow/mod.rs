//! Transformer velocity-field model over voxel latents.
//!
//! The base model maps a noised latent, a timestep and a condition image to
//! a velocity. The control branch is a per-block copy of the base with an
//! extra cross-attention over instruction tokens; its zero-initialized
//! projection is added to each base block's output.

mod latent;

pub use latent::{
    decode_occupancy, decode_texture, encode_geometry, encode_texture, occupancy_tokens, patchify, unpatchify,
};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Graph, ParamSet, ParameterStore, Scalar, Tensor, Var};
use crate::voxel::{InstrTokens, ViewImage, DEFAULT_GRID, DEFAULT_VIEW, VOCAB_SIZE};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

/// Instruction length in tokens.
pub const INSTR_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Geometry,
    Texture,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Geometry => "geometry",
            Stage::Texture => "texture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "geometry" => Some(Stage::Geometry),
            "texture" => Some(Stage::Texture),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub view: usize,
    pub image_patch: usize,
    pub vocab: usize,
    pub stage: Stage,
}

impl ModelConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            grid: DEFAULT_GRID,
            patch: 4,
            width: 64,
            heads: 4,
            blocks: 4,
            view: DEFAULT_VIEW,
            image_patch: 8,
            vocab: VOCAB_SIZE,
            stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.patch) {
            return bad(format!("patch {} must divide grid {}", self.patch, self.grid));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(2) {
            return bad(format!("width {} must be even", self.width));
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.image_patch == 0 || !self.view.is_multiple_of(self.image_patch) {
            return bad(format!("image patch {} must divide view {}", self.image_patch, self.view));
        }
        if self.vocab < VOCAB_SIZE {
            return bad(format!("vocabulary {} smaller than {VOCAB_SIZE}", self.vocab));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.grid / self.patch).pow(3)
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.pow(3)
    }

    /// Latent channels per token.
    pub fn latent_dim(&self) -> usize {
        match self.stage {
            Stage::Geometry => self.patch_volume(),
            Stage::Texture => 3 * self.patch_volume(),
        }
    }

    /// Input channels per token (the texture stage also sees occupancy).
    pub fn input_dim(&self) -> usize {
        match self.stage {
            Stage::Geometry => self.patch_volume(),
            Stage::Texture => 4 * self.patch_volume(),
        }
    }

    pub fn image_tokens(&self) -> usize {
        (self.view / self.image_patch).pow(2)
    }

    pub fn image_dim(&self) -> usize {
        3 * self.image_patch * self.image_patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of SHA-256 over the JSON form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
    }
}

/// Per-batch conditioning inputs, already on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `[B, image_tokens, image_dim]`.
    pub image: Var,
    /// `[B, T, p³]` occupancy, texture stage only.
    pub mask: Option<Var>,
}

/// Condition images as patch tokens with values mapped to `[-1, 1]`.
pub fn image_tokens<T: Scalar>(images: &[&ViewImage], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (w, ip) = (cfg.view, cfg.image_patch);
    let n = w / ip;
    let dim = cfg.image_dim();
    let mut out = Vec::with_capacity(images.len() * n * n * dim);
    for img in images {
        if img.width != w {
            return Err(Error::Contract(format!("condition image width {} != {w}", img.width)));
        }
        for pr in 0..n {
            for pc in 0..n {
                for ch in 0..3 {
                    for dr in 0..ip {
                        for dc in 0..ip {
                            let (r, c) = (pr * ip + dr, pc * ip + dc);
                            let v = img.pixels[(r * w + c) * 3 + ch];
                            out.push(T::cst(f64::from(v) * 2.0 - 1.0));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![images.len(), n * n, dim], out)
}

fn sinusoid<T: Scalar>(t: &[f64], d: usize) -> Result<Tensor<T>> {
    let half = d / 2;
    let mut out = Vec::with_capacity(t.len() * d);
    for &tv in t {
        let s = tv * 1000.0;
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            out.push(T::cst((s * f).cos()));
        }
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            out.push(T::cst((s * f).sin()));
        }
    }
    Tensor::new(vec![t.len(), d], out)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParameterStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    match p.contains(&format!("{name}.b")) {
        true => {
            let b = g.param(p, &format!("{name}.b"))?;
            g.add(y, b)
        }
        false => Ok(y),
    }
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, n: usize, heads: usize) -> Result<Var> {
    let d = g.shape(x)[2];
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    let (b, n, d) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let m = g.shape(ctx)[1];
    let h = cfg.heads;
    let q = linear(g, p, x, &format!("{name}.q"))?;
    let k = linear(g, p, ctx, &format!("{name}.k"))?;
    let v = linear(g, p, ctx, &format!("{name}.v"))?;
    let q = split_heads(g, q, b, n, h)?;
    let k = split_heads(g, k, b, m, h)?;
    let v = split_heads(g, v, b, m, h)?;
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.mul_scalar(scores, 1.0 / (cfg.head_dim() as f64).sqrt())?;
    let att = g.softmax(scores)?;
    let o = g.matmul(att, v)?;
    let o = g.reshape(o, &[b, h, n, d / h])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, n, d])?;
    linear(g, p, o, &format!("{name}.o"))
}

/// `LN(x) * scale(c) + shift(c)`, with per-sample modulation from `c`.
fn modulate<T: Scalar>(g: &mut Graph<T>, p: &ParameterStore<T>, x: Var, c: Var, name: &str) -> Result<Var> {
    let (b, d) = (g.shape(c)[0], g.shape(c)[1]);
    let h = g.layer_norm(x)?;
    let scale = linear(g, p, c, &format!("{name}.scale"))?;
    let scale = g.reshape(scale, &[b, 1, d])?;
    let shift = linear(g, p, c, &format!("{name}.shift"))?;
    let shift = g.reshape(shift, &[b, 1, d])?;
    let h = g.mul(h, scale)?;
    g.add(h, shift)
}

#[allow(clippy::too_many_arguments)]
fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
    c: Var,
    img: Var,
    instr: Option<Var>,
) -> Result<Var> {
    let h = modulate(g, p, x, c, &format!("{name}.mod_attn"))?;
    let h = attention(g, p, cfg, &format!("{name}.attn"), h, h)?;
    let x = g.add(x, h)?;
    let h = g.layer_norm(x)?;
    let h = attention(g, p, cfg, &format!("{name}.cross"), h, img)?;
    let mut x = g.add(x, h)?;
    if let Some(e) = instr {
        let h = g.layer_norm(x)?;
        let h = attention(g, p, cfg, &format!("{name}.instr"), h, e)?;
        x = g.add(x, h)?;
    }
    let h = modulate(g, p, x, c, &format!("{name}.mod_ffn"))?;
    let h = linear(g, p, h, &format!("{name}.ffn.up"))?;
    let h = g.gelu(h)?;
    let h = linear(g, p, h, &format!("{name}.ffn.down"))?;
    g.add(x, h)
}

/// Records one velocity evaluation. `x_t` is `[B, T, latent_dim]`; with
/// `steer` set the control branch is wired in.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    x_t: Var,
    t: &[f64],
    cond: CondVars,
    steer: Option<&[InstrTokens]>,
) -> Result<Var> {
    let shape = g.shape(x_t).to_vec();
    let b = t.len();
    if shape != [b, cfg.tokens(), cfg.latent_dim()] {
        return Err(Error::shape(
            "flow-forward",
            format!("latent {shape:?} for batch {b}, expected [{b}, {}, {}]", cfg.tokens(), cfg.latent_dim()),
        ));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Contract(format!("timestep {bad} outside [0, 1]")));
    }
    let input = match (cfg.stage, cond.mask) {
        (Stage::Geometry, _) => x_t,
        (Stage::Texture, Some(m)) => g.concat(&[x_t, m], 2)?,
        (Stage::Texture, None) => return Err(Error::Contract("texture stage needs an occupancy mask".into())),
    };
    let h = linear(g, p, input, "base.x_embed")?;
    let pos = g.param(p, "base.pos")?;
    let mut h = g.add(h, pos)?;

    let img = linear(g, p, cond.image, "base.img_embed")?;
    let img_pos = g.param(p, "base.img_pos")?;
    let img = g.add(img, img_pos)?;

    let freq = g.constant(sinusoid(t, cfg.width)?)?;
    let c = linear(g, p, freq, "base.t_embed.fc1")?;
    let c = g.gelu(c)?;
    let c = linear(g, p, c, "base.t_embed.fc2")?;
    let c = g.gelu(c)?;

    let mut ctrl = None;
    if let Some(tokens) = steer {
        if tokens.len() != b {
            return Err(Error::shape("flow-forward", format!("{} instructions for batch {b}", tokens.len())));
        }
        if !p.contains("ctrl.instr_embed") {
            return Err(Error::MissingPrerequisite("model has no control branch".into()));
        }
        let ids: Vec<usize> = tokens.iter().flat_map(|t| t.iter().map(|&v| v as usize)).collect();
        let table = g.param(p, "ctrl.instr_embed")?;
        let e = g.embedding(table, &ids)?;
        let e = g.reshape(e, &[b, INSTR_LEN, cfg.width])?;
        let epos = g.param(p, "ctrl.instr_pos")?;
        let e = g.add(e, epos)?;
        ctrl = Some((h, e));
    }

    for i in 0..cfg.blocks {
        let base_out = block(g, p, cfg, &format!("base.blocks.{i}"), h, c, img, None)?;
        h = match ctrl {
            Some((cs, e)) => {
                let cs = block(g, p, cfg, &format!("ctrl.blocks.{i}"), cs, c, img, Some(e))?;
                let tap = linear(g, p, cs, &format!("ctrl.blocks.{i}.proj"))?;
                ctrl = Some((cs, e));
                g.add(base_out, tap)?
            }
            None => base_out,
        };
    }
    let h = modulate(g, p, h, c, "base.final.mod")?;
    let out = linear(g, p, h, "base.out")?;
    // Time-gated pass-through of the noisy latent.
    let gate = linear(g, p, c, "base.skip")?;
    let gate = g.reshape(gate, &[b, 1, cfg.latent_dim()])?;
    let skip = g.mul(x_t, gate)?;
    g.add(out, skip)
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape matches")
}

struct Init<'a, R> {
    store: &'a mut ParameterStore<f32>,
    rng: &'a mut R,
    set: ParamSet,
}

impl<R: Rng> Init<'_, R> {
    fn put(&mut self, name: String, t: Tensor<f32>) -> Result<()> {
        self.store.insert(name, t, self.set)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        let w = normal(self.rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        self.put(format!("{name}.w"), w)?;
        if bias {
            self.put(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.put(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        self.put(format!("{name}.b"), Tensor::zeros(&[fan_out]))
    }

    fn modulation(&mut self, name: &str, d: usize) -> Result<()> {
        self.zero_linear(&format!("{name}.shift"), d, d)?;
        self.put(format!("{name}.scale.w"), Tensor::zeros(&[d, d]))?;
        self.put(format!("{name}.scale.b"), Tensor::full(&[d], 1.0))
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<()> {
        for part in ["q", "k", "v"] {
            self.linear(&format!("{name}.{part}"), d, d, false)?;
        }
        self.linear(&format!("{name}.o"), d, d, true)
    }

    fn block(&mut self, name: &str, d: usize) -> Result<()> {
        self.modulation(&format!("{name}.mod_attn"), d)?;
        self.attention(&format!("{name}.attn"), d)?;
        self.attention(&format!("{name}.cross"), d)?;
        self.modulation(&format!("{name}.mod_ffn"), d)?;
        self.linear(&format!("{name}.ffn.up"), d, 4 * d, true)?;
        self.linear(&format!("{name}.ffn.down"), 4 * d, d, true)
    }
}

/// A velocity model: config plus named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub params: ParameterStore<f32>,
}

impl FlowModel {
    pub fn init_base(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut store = ParameterStore::new();
        let mut rng = stream_rng(seed, stream::INIT, 0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            set: ParamSet::Base,
        };
        init.linear("base.x_embed", config.input_dim(), d, true)?;
        let pos = normal(init.rng, &[config.tokens(), d], 0.1);
        init.put("base.pos".into(), pos)?;
        init.linear("base.img_embed", config.image_dim(), d, true)?;
        let img_pos = normal(init.rng, &[config.image_tokens(), d], 0.1);
        init.put("base.img_pos".into(), img_pos)?;
        init.linear("base.t_embed.fc1", d, d, true)?;
        init.linear("base.t_embed.fc2", d, d, true)?;
        for i in 0..config.blocks {
            init.block(&format!("base.blocks.{i}"), d)?;
        }
        init.modulation("base.final.mod", d)?;
        init.zero_linear("base.out", d, config.latent_dim())?;
        init.zero_linear("base.skip", d, config.latent_dim())?;
        Ok(Self { config, params: store })
    }

    pub fn has_control(&self) -> bool {
        self.params.contains("ctrl.instr_embed")
    }

    /// Adds the control branch: block weights copied from the base, fresh
    /// instruction attention, zero projections. Freezes the base.
    pub fn init_control(&mut self, seed: u64) -> Result<()> {
        if self.has_control() {
            return Err(Error::Contract("control branch already present".into()));
        }
        let d = self.config.width;
        let copies: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .filter_map(|p| {
                p.name
                    .strip_prefix("base.blocks.")
                    .map(|rest| (format!("ctrl.blocks.{rest}"), p.value.clone()))
            })
            .collect();
        let mut rng = stream_rng(seed, stream::INIT, 1);
        let mut init = Init {
            store: &mut self.params,
            rng: &mut rng,
            set: ParamSet::Control,
        };
        for (name, value) in copies {
            init.put(name, value)?;
        }
        let table = normal(init.rng, &[self.config.vocab, d], 1.0);
        init.put("ctrl.instr_embed".into(), table)?;
        let pos = normal(init.rng, &[INSTR_LEN, d], 0.1);
        init.put("ctrl.instr_pos".into(), pos)?;
        for i in 0..self.config.blocks {
            init.attention(&format!("ctrl.blocks.{i}.instr"), d)?;
            init.zero_linear(&format!("ctrl.blocks.{i}.proj"), d, d)?;
        }
        self.params.set_trainable(ParamSet::Base, false);
        self.params.set_trainable(ParamSet::Control, true);
        Ok(())
    }

    fn velocity(
        &self,
        x_t: &Tensor<f32>,
        t: &[f64],
        image: &Tensor<f32>,
        mask: Option<&Tensor<f32>>,
        steer: Option<&[InstrTokens]>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone())?;
        let image = g.constant(image.clone())?;
        let mask = mask.map(|m| g.constant(m.clone())).transpose()?;
        let v = forward(&mut g, &self.params, &self.config, x, t, CondVars { image, mask }, steer)?;
        Ok(g.value(v).clone())
    }

    /// `v_θ(x_t, t | cond)`.
    pub fn velocity_base(
        &self,
        x_t: &Tensor<f32>,
        t: &[f64],
        image: &Tensor<f32>,
        mask: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        self.velocity(x_t, t, image, mask, None)
    }

    /// `v_{θ,φ}(x_t, t | cond, instr)`.
    pub fn velocity_steered(
        &self,
        x_t: &Tensor<f32>,
        t: &[f64],
        image: &Tensor<f32>,
        mask: Option<&Tensor<f32>>,
        instr: &[InstrTokens],
    ) -> Result<Tensor<f32>> {
        self.velocity(x_t, t, image, mask, Some(instr))
    }

    pub fn to_checkpoint(&self, rng_seed: u64, step: u64) -> Checkpoint {
        Checkpoint {
            records: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            config_hash: self.config.hash(),
            rng_seed,
            step,
        }
    }

    /// Rebuilds a model from checkpoint records named `base.*` / `ctrl.*`;
    /// other records are ignored. A control branch freezes the base.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.config_hash != config.hash() {
            return Err(Error::Format("checkpoint was written for a different model config".into()));
        }
        let reference = Self::init_base(config.clone(), 0)?;
        let mut params = ParameterStore::new();
        let mut control = false;
        for (name, value) in &ck.records {
            let set = if name.starts_with("base.") {
                if reference.params.get(name).map(|p| p.value.shape()) != Some(value.shape()) {
                    return Err(Error::Format(format!("unexpected base record {name}")));
                }
                ParamSet::Base
            } else if name.starts_with("ctrl.") {
                control = true;
                ParamSet::Control
            } else {
                continue;
            };
            params.insert(name.clone(), value.clone(), set)?;
        }
        if params.numel_of(ParamSet::Base) != reference.params.numel() {
            return Err(Error::Format("checkpoint is missing base weights".into()));
        }
        if control {
            params.set_trainable(ParamSet::Base, false);
        }
        Ok(Self { config, params })
    }

    pub fn config_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the checkpoint plus a JSON config sidecar at `<path>.json`.
    pub fn save(&self, path: &Path, ck: &Checkpoint) -> Result<()> {
        std::fs::write(Self::config_path(path), self.config.to_json())?;
        write_checkpoint(BufWriter::new(File::create(path)?), ck)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let cfg_path = Self::config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| {
            Error::MissingPrerequisite(format!("cannot read model config {}: {e}", cfg_path.display()))
        })?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("model config: {e}")))?;
        let file = File::open(path)
            .map_err(|e| Error::MissingPrerequisite(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let ck = read_checkpoint(BufReader::new(file))?;
        Ok((Self::from_checkpoint(config, &ck)?, ck))
    }
}
