use super::{
    corrupt, filter_consistency, filter_correctness, propose_instructions, write_dataset, EditPairRecord, Split,
    DATASET_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::voxel::{build_asset, Category, SceneGraph, View, DEFAULT_GRID, DEFAULT_VIEW};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

const HELD_OUT_BIT: u64 = 1 << 63;
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Attempted edit pairs (before filtering).
    pub pairs: usize,
    /// Training instructions drawn per scene.
    pub per_scene: usize,
    /// Extra instructions per scene reserved for the seen-unseen-edit split.
    pub held_out_edits: usize,
    /// Corruption probability.
    pub q: f64,
    /// Consistency threshold.
    pub tau: f64,
    /// Category weights: addition, removal, texture.
    pub weights: [f64; 3],
    pub grid: usize,
    pub view_size: usize,
    /// View rendered as the condition image.
    pub view: View,
    pub split: Split,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            per_scene: 4,
            held_out_edits: 2,
            q: 0.7,
            tau: 0.01,
            weights: [1.0, 1.0, 1.0],
            grid: DEFAULT_GRID,
            view_size: DEFAULT_VIEW,
            view: View::Front,
            split: Split::Train,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs == 0 {
            return bad("pairs must be at least 1".into());
        }
        if self.per_scene == 0 {
            return bad("per_scene must be at least 1".into());
        }
        if self.split == Split::SeenUnseenEdit && self.held_out_edits == 0 {
            return bad("the seen-unseen-edit split needs held_out_edits >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.q) {
            return bad(format!("q = {} outside [0, 1]", self.q));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau = {} outside (0, 1]", self.tau));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("bad category weights {:?}", self.weights));
        }
        if self.grid < 4 || self.view_size == 0 {
            return bad(format!("grid {} / view {} too small", self.grid, self.view_size));
        }
        Ok(())
    }

    /// Scene seed `i` of this config's split. Held-out scenes have the top
    /// bit set, training scenes have it clear.
    pub fn scene_seed(&self, i: u64) -> u64 {
        match self.split {
            Split::UnseenAsset => derive_seed(self.seed, "scene-held-out", i) | HELD_OUT_BIT,
            Split::Train | Split::SeenUnseenEdit => derive_seed(self.seed, "scene-train", i) & !HELD_OUT_BIT,
        }
    }
}

/// Stage-wise filter counts. `clean_*` and `corrupted_*` use the hidden labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub attempted: usize,
    pub correctness_kept: usize,
    pub consistency_kept: usize,
    pub clean_attempted: usize,
    pub clean_kept: usize,
    pub corrupted_attempted: usize,
    pub corrupted_kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub record_count: usize,
    pub grid: usize,
    pub view_size: usize,
    pub split: Split,
    pub generator_seed: u64,
    pub q: f64,
    pub tau: f64,
    pub category_histogram: BTreeMap<String, usize>,
    pub counts: StageCounts,
    /// Fraction of attempted pairs passing the correctness filter.
    pub correctness_keep_rate: f64,
    /// Fraction of correctness survivors passing the consistency filter.
    pub consistency_keep_rate: f64,
    /// Stored records over attempted pairs.
    pub overall_keep_rate: f64,
    /// Scenes that offered fewer instructions than requested.
    pub truncated_scenes: usize,
}

pub struct GeneratedDataset {
    pub records: Vec<EditPairRecord>,
    pub manifest: DatasetManifest,
}

struct Attempt {
    record: EditPairRecord,
    kept_correctness: bool,
}

struct SceneBatch {
    attempts: Vec<Attempt>,
    truncated: bool,
}

fn process_scene(cfg: &DataConfig, index: u64) -> Result<SceneBatch> {
    let seed = cfg.scene_seed(index);
    let scene = SceneGraph::generate(seed);
    if let Err(Error::DegenerateScene(_)) = build_asset(&scene, cfg.grid) {
        return Ok(SceneBatch {
            attempts: Vec::new(),
            truncated: true,
        });
    }
    let total = cfg.per_scene + cfg.held_out_edits;
    let mut rng = stream_rng(seed, "propose", 0);
    let proposals = propose_instructions(&scene, total, cfg.weights, cfg.grid, &mut rng)?;
    let list = &proposals.instructions;
    let chosen = match cfg.split {
        Split::Train | Split::UnseenAsset => &list[..list.len().min(cfg.per_scene)],
        Split::SeenUnseenEdit => &list[list.len().min(cfg.per_scene)..],
    };
    let mut attempts = Vec::with_capacity(chosen.len());
    for (j, instr) in chosen.iter().enumerate() {
        let mut record = EditPairRecord::oracle(seed, *instr, cfg.grid, cfg.view, cfg.view_size, cfg.split)?;
        let mut crng = stream_rng(seed, "corrupt", j as u64 ^ (u64::from(cfg.split.code()) << 32));
        corrupt(&mut record, cfg.q, &mut crng)?;
        let (pass, _) = filter_correctness(&record)?;
        record.correctness_pass = pass;
        if pass {
            let (ok, score) = filter_consistency(&record, cfg.tau, cfg.view_size)?;
            record.consistency_pass = ok;
            record.consistency_score = score as f32;
        }
        attempts.push(Attempt {
            record,
            kept_correctness: pass,
        });
    }
    Ok(SceneBatch {
        attempts,
        truncated: proposals.truncated,
    })
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Runs the full pipeline in memory: scenes, proposals, oracle edits,
/// corruption and both filters. Scenes are processed in parallel and
/// consumed in seed order, so the output does not depend on thread count.
pub fn generate_records(cfg: &DataConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let mut counts = StageCounts::default();
    let mut records = Vec::new();
    let mut truncated_scenes = 0;
    let mut next = 0u64;
    let mut empty_chunks = 0;
    while counts.attempted < cfg.pairs {
        let batches: Vec<Result<SceneBatch>> = (next..next + CHUNK as u64)
            .into_par_iter()
            .map(|i| process_scene(cfg, i))
            .collect();
        next += CHUNK as u64;
        let before = counts.attempted;
        for batch in batches {
            let batch = batch?;
            truncated_scenes += usize::from(batch.truncated);
            for a in batch.attempts {
                if counts.attempted == cfg.pairs {
                    break;
                }
                counts.attempted += 1;
                let r = a.record;
                if r.corrupted {
                    counts.corrupted_attempted += 1;
                } else {
                    counts.clean_attempted += 1;
                }
                counts.correctness_kept += usize::from(a.kept_correctness);
                if r.passed() {
                    counts.consistency_kept += 1;
                    if r.corrupted {
                        counts.corrupted_kept += 1;
                    } else {
                        counts.clean_kept += 1;
                    }
                    records.push(r);
                }
            }
            if counts.attempted == cfg.pairs {
                break;
            }
        }
        empty_chunks = if counts.attempted == before { empty_chunks + 1 } else { 0 };
        if empty_chunks >= 64 {
            return Err(Error::Config("category weights admit no instruction on generated scenes".into()));
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hist: BTreeMap<String, usize> = Category::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
    for r in &records {
        *hist.get_mut(r.category().name()).expect("all categories present") += 1;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        record_count: records.len(),
        grid: cfg.grid,
        view_size: cfg.view_size,
        split: cfg.split,
        generator_seed: cfg.seed,
        q: cfg.q,
        tau: cfg.tau,
        category_histogram: hist,
        correctness_keep_rate: rate(counts.correctness_kept, counts.attempted),
        consistency_keep_rate: rate(counts.consistency_kept, counts.correctness_kept),
        overall_keep_rate: rate(records.len(), counts.attempted),
        counts,
        truncated_scenes,
    };
    Ok(GeneratedDataset { records, manifest })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Generates a dataset and writes it to `path` plus a `<path>.json`
/// manifest. Files are written to a temporary name and renamed, so a
/// failure leaves nothing behind.
pub fn generate_dataset(cfg: &DataConfig, path: &Path) -> Result<DatasetManifest> {
    let data = generate_records(cfg)?;
    let tmp = path.with_extension("tmp-s3dp");
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_dataset(&mut w, cfg.grid, cfg.view_size, &data.records)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        let json = serde_json::to_string_pretty(&data.manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(manifest_path(path), json + "\n")?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map(|_| data.manifest)
}
