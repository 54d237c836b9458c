use super::icp::{icp_align, IcpOptions};
use super::metrics::{chamfer, f1_score, is_no_edit, view_distance};
use crate::data::{EditPairRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::sample::{edit_assets, EditModels, EditRequest, SamplerConfig};
use crate::voxel::{sample_surface_points, Category, VoxelAsset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Surface points sampled per asset.
    pub points: usize,
    /// F1 distance threshold in unit-cube coordinates.
    pub tau: f64,
    /// Render width for view distances.
    pub view_size: usize,
    /// Align predicted point clouds to ground truth before Chamfer and F1.
    pub icp: bool,
    /// Relative change below which a prediction counts as no edit.
    pub no_edit_threshold: f64,
    /// Evaluate only these splits; empty means all.
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            tau: 0.05,
            view_size: crate::voxel::DEFAULT_VIEW,
            icp: false,
            no_edit_threshold: 0.1,
            splits: Vec::new(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Config("points must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.view_size == 0 {
            return Err(Error::Config("view_size must be positive".into()));
        }
        if !(self.no_edit_threshold > 0.0) {
            return Err(Error::Config("no_edit_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn includes(&self, split: Split) -> bool {
        self.splits.is_empty() || self.splits.contains(&split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub category: Category,
    pub split: Split,
    pub chamfer: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub view_distance: Option<f64>,
    /// `None` when failed or when the reference edit is empty.
    pub no_edit: Option<bool>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub category: String,
    pub split: String,
    pub count: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub chamfer: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub view_distance: Option<f64>,
    pub no_edit_rate: Option<f64>,
    pub no_edit_judged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: BenchConfig,
    pub sampler: Option<SamplerConfig>,
    pub rows: Vec<MetricRow>,
    /// Per category × split, then per split over all categories (`"all"`),
    /// then over everything.
    pub aggregates: Vec<Aggregate>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn aggregate(category: String, split: String, rows: &[&MetricRow]) -> Aggregate {
    let failures = rows.iter().filter(|r| r.failed).count();
    let judged: Vec<bool> = rows.iter().filter_map(|r| r.no_edit).collect();
    Aggregate {
        category,
        split,
        count: rows.len(),
        failures,
        failure_rate: if rows.is_empty() { 0.0 } else { failures as f64 / rows.len() as f64 },
        chamfer: mean(rows.iter().map(|r| r.chamfer)),
        f1: mean(rows.iter().map(|r| r.f1)),
        iou: mean(rows.iter().map(|r| r.iou)),
        view_distance: mean(rows.iter().map(|r| r.view_distance)),
        no_edit_rate: (!judged.is_empty()).then(|| judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64),
        no_edit_judged: judged.len(),
    }
}

/// Aggregates recomputed from scratch.
pub fn aggregate_rows(rows: &[MetricRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    let mut splits: Vec<Split> = rows.iter().map(|r| r.split).collect();
    splits.sort_by_key(|s| s.code());
    splits.dedup();
    for &split in &splits {
        for cat in Category::ALL {
            let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.split == split && r.category == cat).collect();
            if !sel.is_empty() {
                out.push(aggregate(cat.name().into(), split.name().into(), &sel));
            }
        }
    }
    for &split in &splits {
        let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.split == split).collect();
        out.push(aggregate("all".into(), split.name().into(), &sel));
    }
    out.push(aggregate("all".into(), "all".into(), &rows.iter().collect::<Vec<_>>()));
    out
}

fn row_id(index: usize, r: &EditPairRecord) -> String {
    format!("{}-{index:05}-{:016x}", r.split.name(), r.seed)
}

fn score(record: &EditPairRecord, pred: &VoxelAsset, cfg: &BenchConfig, key: u64) -> Result<MetricRow> {
    let gt = &record.edited;
    let seed = derive_seed(cfg.seed, stream::EVAL, key);
    let mut pc = sample_surface_points(pred, cfg.points, seed)?;
    let gc = sample_surface_points(gt, cfg.points, seed)?;
    if cfg.icp {
        pc = icp_align(&pc, &gc, &IcpOptions::default())?.aligned;
    }
    Ok(MetricRow {
        id: String::new(),
        category: record.category(),
        split: record.split,
        chamfer: Some(chamfer(&pc, &gc)?),
        f1: Some(f1_score(&pc, &gc, cfg.tau)?),
        iou: Some(pred.iou(gt)),
        view_distance: Some(view_distance(pred, gt, cfg.view_size)?),
        no_edit: is_no_edit(pred, &record.source, gt, record.category() == Category::Texture, cfg.no_edit_threshold),
        failed: false,
        error: None,
    })
}

/// Scores predictions against the records' ground truth. A failed
/// prediction (or one that cannot be scored) becomes a failed row.
pub fn evaluate_predictions(
    records: &[EditPairRecord],
    predictions: &[Result<VoxelAsset>],
    cfg: &BenchConfig,
    sampler: Option<SamplerConfig>,
) -> Result<MetricReport> {
    cfg.validate()?;
    if records.len() != predictions.len() {
        return Err(Error::Contract(format!("{} records but {} predictions", records.len(), predictions.len())));
    }
    let rows: Vec<MetricRow> = records
        .par_iter()
        .zip(predictions.par_iter())
        .enumerate()
        .filter(|(_, (r, _))| cfg.includes(r.split))
        .map(|(i, (r, p))| {
            let outcome = match p {
                Ok(asset) if asset.grid() != r.edited.grid() => {
                    Err(Error::shape("benchmark", format!("prediction grid {} vs {}", asset.grid(), r.edited.grid())))
                }
                Ok(asset) if asset.occupied_count() == 0 => Err(Error::DegenerateOutput("empty prediction".into())),
                Ok(asset) => score(r, asset, cfg, i as u64),
                Err(e) => Err(Error::DegenerateOutput(e.to_string())),
            };
            let mut row = match outcome {
                Ok(row) => row,
                Err(Error::Shape { op, detail }) => return Err(Error::Shape { op, detail }),
                Err(e) => MetricRow {
                    id: String::new(),
                    category: r.category(),
                    split: r.split,
                    chamfer: None,
                    f1: None,
                    iou: None,
                    view_distance: None,
                    no_edit: None,
                    failed: true,
                    error: Some(e.to_string()),
                },
            };
            row.id = row_id(i, r);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let aggregates = aggregate_rows(&rows);
    Ok(MetricReport {
        config: cfg.clone(),
        sampler,
        rows,
        aggregates,
    })
}

/// Seed of one benchmark request, independent of batching and filtering.
pub fn request_seed(sampler_seed: u64, record: &EditPairRecord) -> u64 {
    let t = record.tokens;
    let packed = u64::from(t[0]) | u64::from(t[1]) << 16 | u64::from(t[2]) << 32 | u64::from(t[3]) << 48;
    derive_seed(sampler_seed ^ record.seed, stream::SAMPLE, packed)
}

/// Requests per sampler call.
pub const EDIT_CHUNK: usize = 25;

/// Runs the edit pipeline on every selected record, then scores it.
pub fn predict(records: &[EditPairRecord], models: &EditModels, sampler: &SamplerConfig, cfg: &BenchConfig) -> Result<Vec<Result<VoxelAsset>>> {
    let mut out: Vec<Result<VoxelAsset>> = Vec::with_capacity(records.len());
    let selected: Vec<usize> = (0..records.len()).filter(|&i| cfg.includes(records[i].split)).collect();
    let mut preds: BTreeMap<usize, Result<VoxelAsset>> = BTreeMap::new();
    for chunk in selected.chunks(EDIT_CHUNK) {
        let reqs: Vec<EditRequest<'_>> = chunk
            .iter()
            .map(|&i| EditRequest {
                condition: &records[i].condition,
                instruction: Some(records[i].instruction),
                seed: request_seed(sampler.seed, &records[i]),
            })
            .collect();
        let (res, _) = edit_assets(&reqs, models, sampler)?;
        for (&i, r) in chunk.iter().zip(res) {
            preds.insert(i, r);
        }
    }
    for i in 0..records.len() {
        out.push(preds.remove(&i).unwrap_or_else(|| Err(Error::Contract("not selected".into()))));
    }
    Ok(out)
}

pub fn run_benchmark(records: &[EditPairRecord], models: &EditModels, sampler: &SamplerConfig, cfg: &BenchConfig) -> Result<MetricReport> {
    cfg.validate()?;
    sampler.validate()?;
    let preds = predict(records, models, sampler, cfg)?;
    evaluate_predictions(records, &preds, cfg, Some(sampler.clone()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("id,category,split,chamfer,f1,iou,view_distance,no_edit,failed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.id,
                r.category.name(),
                r.split.name(),
                opt(r.chamfer),
                opt(r.f1),
                opt(r.iou),
                opt(r.view_distance),
                r.no_edit.map(|b| u8::from(b).to_string()).unwrap_or_default(),
                u8::from(r.failed)
            );
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from("category,split,count,failures,failure_rate,chamfer,f1,iou,view_distance,no_edit_rate\n");
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                a.category,
                a.split,
                a.count,
                a.failures,
                opt(Some(a.failure_rate)),
                opt(a.chamfer),
                opt(a.f1),
                opt(a.iou),
                opt(a.view_distance),
                opt(a.no_edit_rate)
            );
        }
        s
    }

    /// Aggregates over every row of one category, across splits.
    pub fn overall(&self) -> &Aggregate {
        self.aggregates.last().expect("overall aggregate is always present")
    }

    /// Checks the stored aggregates against a fresh recomputation.
    pub fn verify(&self) -> Result<()> {
        if aggregate_rows(&self.rows) != self.aggregates {
            return Err(Error::Contract("report aggregates do not match its rows".into()));
        }
        Ok(())
    }
}

/// Scaling-curve table: one line per (dataset size, aggregate).
pub fn plot_data(points: &[(usize, &MetricReport)]) -> String {
    let mut s = String::from("dataset_size,category,split,count,chamfer,f1,iou,view_distance,no_edit_rate,failure_rate\n");
    for (size, report) in points {
        for a in &report.aggregates {
            let _ = writeln!(
                s,
                "{size},{},{},{},{},{},{},{},{},{}",
                a.category,
                a.split,
                a.count,
                opt(a.chamfer),
                opt(a.f1),
                opt(a.iou),
                opt(a.view_distance),
                opt(a.no_edit_rate),
                opt(Some(a.failure_rate))
            );
        }
    }
    s
}
