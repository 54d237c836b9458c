//! Synthetic edit-pair generation, corruption and filtering.

mod format;
mod generate;

pub use format::{read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{generate_dataset, generate_records, manifest_path, DataConfig, DatasetManifest, GeneratedDataset, StageCounts};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::voxel::{
    apply_edit, build_asset, encode_instruction, render_hits, render_ortho, Category, EditInstruction,
    InstrTokens, SceneGraph, View, ViewImage, VoxelAsset, PALETTE, PALETTE_LEN, SIZE_BUCKETS, SLOT_COUNT,
};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Which population a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    /// Training scenes with held-out instructions.
    SeenUnseenEdit,
    /// Scenes from the held-out seed range.
    UnseenAsset,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::SeenUnseenEdit, Split::UnseenAsset];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::SeenUnseenEdit => "seen-unseen-edit",
            Split::UnseenAsset => "unseen-asset",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::SeenUnseenEdit => 1,
            Split::UnseenAsset => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == c)
    }
}

/// One (source, instruction, edited) triplet with its filter verdicts.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPairRecord {
    pub seed: u64,
    pub source: VoxelAsset,
    pub instruction: EditInstruction,
    pub tokens: InstrTokens,
    pub edited: VoxelAsset,
    pub condition: ViewImage,
    /// Hidden oracle label: the edited asset was deliberately damaged.
    pub corrupted: bool,
    pub correctness_pass: bool,
    pub consistency_pass: bool,
    pub consistency_score: f32,
    pub split: Split,
}

impl EditPairRecord {
    /// Builds an uncorrupted record from the ground-truth edit.
    pub fn oracle(seed: u64, instruction: EditInstruction, g: usize, view: View, width: usize, split: Split) -> Result<Self> {
        let scene = SceneGraph::generate(seed);
        let source = build_asset(&scene, g)?;
        let edited = build_asset(&apply_edit(&scene, &instruction)?, g)?;
        Ok(Self {
            seed,
            tokens: encode_instruction(&instruction)?,
            condition: render_ortho(&source, view, width),
            source,
            instruction,
            edited,
            corrupted: false,
            correctness_pass: false,
            consistency_pass: false,
            consistency_score: 0.0,
            split,
        })
    }

    pub fn scene(&self) -> SceneGraph {
        SceneGraph::generate(self.seed)
    }

    /// The ground-truth edited asset for this record's instruction.
    pub fn expected(&self) -> Result<VoxelAsset> {
        build_asset(&apply_edit(&self.scene(), &self.instruction)?, self.source.grid())
    }

    pub fn category(&self) -> Category {
        self.instruction.category()
    }

    pub fn passed(&self) -> bool {
        self.correctness_pass && self.consistency_pass
    }

    /// Checks the record against its regenerated scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("record seed {}: {m}", self.seed)));
        if encode_instruction(&self.instruction)? != self.tokens {
            return bad("tokens do not encode the instruction".into());
        }
        let scene = self.scene();
        if build_asset(&scene, self.source.grid())? != self.source {
            return bad("source asset differs from its scene".into());
        }
        if !self.corrupted && self.expected()? != self.edited {
            return bad("uncorrupted record differs from the oracle edit".into());
        }
        Ok(())
    }
}

fn changes(scene: &SceneGraph, instr: &EditInstruction, source: &VoxelAsset) -> bool {
    apply_edit(scene, instr)
        .and_then(|s| build_asset(&s, source.grid()))
        .map(|a| a != *source)
        .unwrap_or(false)
}

/// All instructions of one category that are valid for the scene, before
/// the (costlier) check that they change the asset.
fn candidates(scene: &SceneGraph, cat: Category) -> Vec<EditInstruction> {
    let mut out = Vec::new();
    for slot in 0..SLOT_COUNT {
        let present = scene.slot(slot);
        match (cat, present) {
            (Category::Addition, None) => {
                for size in 0..SIZE_BUCKETS {
                    for color in 0..PALETTE_LEN {
                        out.push(EditInstruction::Addition { slot, size, color });
                    }
                }
            }
            (Category::Removal, Some(_)) => out.push(EditInstruction::Removal { slot }),
            (Category::Texture, Some(p)) => {
                for color in (0..PALETTE_LEN).filter(|&c| c != p.color) {
                    out.push(EditInstruction::Texture { slot, color });
                }
            }
            _ => {}
        }
    }
    out
}

/// Outcome of [`propose_instructions`].
#[derive(Clone, Debug, PartialEq)]
pub struct Proposals {
    pub instructions: Vec<EditInstruction>,
    /// Fewer than the requested number were available.
    pub truncated: bool,
}

/// Draws up to `k` distinct instructions that change the scene's asset and
/// leave it non-empty. Categories are picked with `weights`
/// (addition, removal, texture) among those with candidates left.
pub fn propose_instructions(scene: &SceneGraph, k: usize, weights: [f64; 3], g: usize, rng: &mut Rng) -> Result<Proposals> {
    if k == 0 {
        return Err(Error::Contract("at least one instruction must be requested".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("bad category weights {weights:?}")));
    }
    let source = build_asset(scene, g)?;
    let mut pools: Vec<Vec<EditInstruction>> = Category::ALL
        .iter()
        .map(|&c| {
            let mut v = candidates(scene, c);
            v.shuffle(rng);
            v
        })
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let live: Vec<usize> = (0..3).filter(|&c| weights[c] > 0.0 && !pools[c].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        let total: f64 = live.iter().map(|&c| weights[c]).sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = live[live.len() - 1];
        for &c in &live {
            if r < weights[c] {
                pick = c;
                break;
            }
            r -= weights[c];
        }
        let instr = pools[pick].pop().expect("pool is non-empty");
        if changes(scene, &instr, &source) {
            out.push(instr);
        }
    }
    Ok(Proposals {
        truncated: out.len() < k,
        instructions: out,
    })
}

/// Damage applied by [`corrupt`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// The same edit applied to a different slot.
    WrongTarget,
    /// The correct edit plus a recolor of another part.
    Overshoot,
    /// The correct edit with 2% of voxels flipped.
    Jitter,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [CorruptionKind::WrongTarget, CorruptionKind::Overshoot, CorruptionKind::Jitter];
}

/// Number of voxels flipped by jitter corruption.
pub fn jitter_count(g: usize) -> usize {
    (0.02 * (g * g * g) as f64).ceil() as usize
}

fn wrong_target(scene: &SceneGraph, instr: &EditInstruction, g: usize, rng: &mut Rng) -> Option<VoxelAsset> {
    let source = build_asset(scene, g).ok()?;
    let mut alts: Vec<EditInstruction> = (0..SLOT_COUNT)
        .filter(|&s| s != instr.slot())
        .map(|slot| match *instr {
            EditInstruction::Addition { size, color, .. } => EditInstruction::Addition { slot, size, color },
            EditInstruction::Removal { .. } => EditInstruction::Removal { slot },
            EditInstruction::Texture { color, .. } => EditInstruction::Texture { slot, color },
        })
        .filter(|alt| alt.validate_for(scene).is_ok() && changes(scene, alt, &source))
        .collect();
    alts.shuffle(rng);
    alts.first().and_then(|alt| build_asset(&apply_edit(scene, alt).ok()?, g).ok())
}

fn overshoot(edited_scene: &SceneGraph, target: u8, g: usize, rng: &mut Rng) -> Option<VoxelAsset> {
    let owners = edited_scene.owner_map(g);
    let mut parts: Vec<u8> = edited_scene
        .primitives
        .iter()
        .map(|p| p.slot)
        .filter(|&s| s != target && owners.contains(&Some(s)))
        .collect();
    parts.shuffle(rng);
    let slot = *parts.first()?;
    let current = edited_scene.slot(slot)?.color;
    let colors: Vec<u8> = (0..PALETTE_LEN).filter(|&c| c != current).collect();
    let color = colors[rng.random_range(0..colors.len())];
    let recolor = EditInstruction::Texture { slot, color };
    build_asset(&apply_edit(edited_scene, &recolor).ok()?, g).ok()
}

fn jitter(asset: &VoxelAsset, rng: &mut Rng) -> VoxelAsset {
    let mut out = asset.clone();
    let mut idx: Vec<usize> = (0..asset.len()).collect();
    let (picked, _) = idx.partial_shuffle(rng, jitter_count(asset.grid()));
    for &i in picked.iter() {
        if out.is_occupied(i) {
            out.set(i, None);
        } else {
            out.set(i, Some(PALETTE[rng.random_range(0..PALETTE.len())]));
        }
    }
    out
}

/// With probability `q`, replaces the edited asset by a damaged version and
/// sets the hidden corruption flag. Falls back to jitter when the drawn kind
/// is impossible for this scene. Returns the kind applied, if any.
pub fn corrupt(record: &mut EditPairRecord, q: f64, rng: &mut Rng) -> Result<Option<CorruptionKind>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("corruption probability {q} outside [0, 1]")));
    }
    if !rng.random_bool(q) {
        return Ok(None);
    }
    let kind = CorruptionKind::ALL[rng.random_range(0..3)];
    corrupt_with(record, kind, rng).map(Some)
}

/// Applies a specific corruption kind unconditionally.
pub fn corrupt_with(record: &mut EditPairRecord, kind: CorruptionKind, rng: &mut Rng) -> Result<CorruptionKind> {
    let g = record.source.grid();
    let scene = record.scene();
    let edited_scene = apply_edit(&scene, &record.instruction)?;
    let expected = build_asset(&edited_scene, g)?;
    let attempt = match kind {
        CorruptionKind::WrongTarget => wrong_target(&scene, &record.instruction, g, rng),
        CorruptionKind::Overshoot => overshoot(&edited_scene, record.instruction.slot(), g, rng),
        CorruptionKind::Jitter => None,
    };
    let (kind, damaged) = match attempt {
        Some(a) if a != expected => (kind, a),
        _ => (CorruptionKind::Jitter, jitter(&expected, rng)),
    };
    record.edited = damaged;
    record.corrupted = true;
    Ok(kind)
}

/// Changes attributed to one slot (`None` is empty space).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDiff {
    pub slot: Option<u8>,
    pub added: usize,
    pub removed: usize,
    pub recolored: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    /// Every detected change between source and edited, per slot.
    pub differences: Vec<SlotDiff>,
    /// Slots whose changes deviate from the instruction's effect.
    pub unexpected: Vec<Option<u8>>,
}

fn slot_key(s: Option<u8>) -> usize {
    s.map_or(SLOT_COUNT as usize, usize::from)
}

fn diff_by_slot(source: &VoxelAsset, edited: &VoxelAsset, owner: &[Option<u8>], new_owner: &[Option<u8>]) -> Vec<SlotDiff> {
    let mut per = vec![SlotDiff::default(); SLOT_COUNT as usize + 1];
    for (k, d) in per.iter_mut().enumerate() {
        d.slot = (k < SLOT_COUNT as usize).then_some(k as u8);
    }
    for i in 0..source.len() {
        let (a, b) = (source.is_occupied(i), edited.is_occupied(i));
        let who = owner[i].or(new_owner[i]);
        let d = &mut per[slot_key(who)];
        match (a, b) {
            (false, true) => d.added += 1,
            (true, false) => d.removed += 1,
            (true, true) if source.color(i) != edited.color(i) => d.recolored += 1,
            _ => {}
        }
    }
    per.retain(|d| d.added + d.removed + d.recolored > 0);
    per
}

/// Exact programmatic differ: passes iff the edited asset matches the
/// instruction's effect voxel for voxel.
pub fn filter_correctness(record: &EditPairRecord) -> Result<(bool, DiffReport)> {
    let scene = record.scene();
    let edited_scene = apply_edit(&scene, &record.instruction)?;
    let g = record.source.grid();
    let expected = build_asset(&edited_scene, g)?;
    let owner = scene.owner_map(g);
    let new_owner = edited_scene.owner_map(g);
    let differences = diff_by_slot(&record.source, &record.edited, &owner, &new_owner);
    let mut bad = vec![false; SLOT_COUNT as usize + 1];
    for i in 0..expected.len() {
        let same = expected.is_occupied(i) == record.edited.is_occupied(i)
            && (!expected.is_occupied(i) || expected.color(i) == record.edited.color(i));
        if !same {
            bad[slot_key(owner[i].or(new_owner[i]))] = true;
        }
    }
    let target = record.instruction.slot() as usize;
    let unexpected: Vec<Option<u8>> = (0..bad.len())
        .filter(|&k| bad[k] && k != target)
        .map(|k| (k < SLOT_COUNT as usize).then_some(k as u8))
        .collect();
    let pass = !bad.iter().any(|&b| b);
    Ok((pass, DiffReport { differences, unexpected }))
}

/// Mean over the six views of the RGB MSE between renders of the edited
/// and the ground-truth edited asset, ignoring pixels that show a voxel the
/// instruction changes.
pub fn consistency_score(record: &EditPairRecord, width: usize) -> Result<f64> {
    let expected = record.expected()?;
    let changed: Vec<bool> = (0..expected.len())
        .map(|i| {
            expected.is_occupied(i) != record.source.is_occupied(i)
                || (expected.is_occupied(i) && expected.color(i) != record.source.color(i))
        })
        .collect();
    let mut total = 0.0;
    for view in View::ALL {
        let src_hits = render_hits(&record.source, view, width);
        let exp_hits = render_hits(&expected, view, width);
        let mask: Vec<bool> = src_hits
            .iter()
            .zip(&exp_hits)
            .map(|(a, b)| a.is_some_and(|i| changed[i]) || b.is_some_and(|i| changed[i]))
            .collect();
        let a = render_ortho(&record.edited, view, width);
        let b = render_ortho(&expected, view, width);
        total += a.masked_mse(&b, Some(&mask));
    }
    Ok(total / View::ALL.len() as f64)
}

pub fn filter_consistency(record: &EditPairRecord, tau: f64, width: usize) -> Result<(bool, f64)> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Contract(format!("consistency threshold {tau} outside (0, 1]")));
    }
    let score = consistency_score(record, width)?;
    Ok((score <= tau, score))
}
