//! Subcommand bodies.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use voxsteer_core::config::RunConfig;
use voxsteer_core::data::{generate_dataset, read_dataset, DataConfig, EditPairRecord, Split};
use voxsteer_core::eval::{evaluate_predictions, plot_data as plot_rows, predict, BenchConfig, MetricReport};
use voxsteer_core::flow::{FlowModel, ModelConfig, Stage};
use voxsteer_core::rng::{derive_seed, stream};
use voxsteer_core::sample::{edit_assets, EditModels, EditRequest, SamplerConfig};
use voxsteer_core::train::{train_loop, LoopOptions, Phase, TrainConfig};
use voxsteer_core::voxel::{
    build_asset, read_voxel_debug, render_ortho, write_ppm, write_voxel_debug, EditInstruction, SceneGraph, View, VoxelAsset,
};
use voxsteer_core::{Error, Result};

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn out_path(rc: &RunConfig) -> Result<PathBuf> {
    rc.path("out")?.ok_or_else(|| bad("--out is required"))
}

fn parse_enum<T>(rc: &RunConfig, key: &str, parse: fn(&str) -> Option<T>) -> Result<Option<T>> {
    match rc.string(key)? {
        None => Ok(None),
        Some(s) => parse(&s).map(Some).ok_or_else(|| bad(format!("invalid {key}: {s}"))),
    }
}

fn load_records(path: &Path) -> Result<Vec<EditPairRecord>> {
    let file = File::open(path).map_err(|e| Error::MissingPrerequisite(format!("cannot open dataset {}: {e}", path.display())))?;
    Ok(read_dataset(BufReader::new(file))?.1)
}

fn load_model(path: &Path, stage: Stage) -> Result<FlowModel> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", path.display())));
    }
    let (model, _) = FlowModel::load(path)?;
    if model.config.stage != stage {
        return Err(bad(format!("{} holds a {} model, expected {}", path.display(), model.config.stage.name(), stage.name())));
    }
    Ok(model)
}

/// SHA-256 of the merged configuration, hex-encoded.
fn config_hash(rc: &RunConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in rc.values() {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn gen_data(rc: &RunConfig) -> Result<()> {
    let weights: Vec<f64> = rc
        .require::<String>("weights")?
        .split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|_| bad(format!("invalid weight {w}"))))
        .collect::<Result<_>>()?;
    let weights: [f64; 3] = weights.try_into().map_err(|_| bad("weights needs three values: addition,removal,texture"))?;
    let cfg = DataConfig {
        pairs: rc.require("pairs")?,
        per_scene: rc.require("per_scene")?,
        held_out_edits: rc.require("held_out_edits")?,
        q: rc.require("q")?,
        tau: rc.require("tau")?,
        weights,
        grid: rc.require("grid")?,
        view_size: rc.require("view_size")?,
        view: parse_enum(rc, "view", View::parse)?.unwrap_or(View::Front),
        split: parse_enum(rc, "split", Split::parse)?.unwrap_or(Split::Train),
        seed: rc.require("seed")?,
    };
    let out = out_path(rc)?;
    let manifest = generate_dataset(&cfg, &out)?;
    println!(
        "wrote {} records to {} (keep rate {:.3})",
        manifest.record_count,
        out.display(),
        manifest.overall_keep_rate
    );
    Ok(())
}

pub fn train(rc: &RunConfig) -> Result<()> {
    let phase = parse_enum(rc, "phase", Phase::parse)?.ok_or_else(|| bad("--phase is required"))?;
    let stage = parse_enum(rc, "stage", Stage::parse)?.ok_or_else(|| bad("--stage is required"))?;
    let mut tc = TrainConfig::new(phase, stage);
    tc.lr = rc.get_or("lr", tc.lr)?;
    tc.batch = rc.require("batch")?;
    tc.accum = rc.get_or("accum", tc.accum)?;
    tc.clip = rc.require("clip")?;
    tc.t_mean = rc.require("t_mean")?;
    tc.t_std = rc.get_or("t_std", tc.t_std)?;
    tc.p_uncond = rc.get_or("p_uncond", tc.p_uncond)?;
    tc.beta = rc.require("beta")?;
    tc.alpha = rc.require("alpha")?;
    tc.weight_decay = rc.require("weight_decay")?;
    tc.steps = rc.get_or("steps", tc.steps)?;
    tc.seed = rc.require("seed")?;
    tc.val_every = rc.require("val_every")?;
    tc.val_batch = rc.require("val_batch")?;
    tc.checkpoint_every = rc.require("checkpoint_every")?;
    tc.allow_geometry_dpo = rc.flag("allow_geometry_dpo")?;
    tc.deterministic = rc.flag("deterministic")?;
    tc.validate()?;
    if phase == Phase::Dpo && stage == Stage::Geometry && !tc.allow_geometry_dpo {
        return Err(bad("DPO is not performed on the geometry stage; pass --allow-geometry-dpo true to override"));
    }

    let load = |key: &str| -> Result<Option<FlowModel>> { rc.path(key)?.map(|p| load_model(&p, stage)).transpose() };
    let init = load("init")?;
    let reference = load("reference")?;
    if phase != Phase::BasePretrain && init.is_none() && rc.path("resume")?.is_none() {
        return Err(Error::MissingPrerequisite(format!("{} needs --init with a trained {} checkpoint", phase.name(), stage.name())));
    }
    let model_config = ModelConfig {
        grid: rc.require("grid")?,
        patch: rc.require("patch")?,
        width: rc.require("width")?,
        heads: rc.require("heads")?,
        blocks: rc.require("blocks")?,
        image_patch: rc.require("image_patch")?,
        ..ModelConfig::new(stage)
    };
    let data = rc.path("data")?.ok_or_else(|| bad("--data is required"))?;
    let records = load_records(&data)?;
    let out = out_path(rc)?;
    fs::create_dir_all(&out)?;
    let outcome = train_loop(
        &tc,
        &records,
        LoopOptions {
            out_dir: Some(out),
            model_config: Some(ModelConfig { view: records.first().map_or(model_config.view, |r| r.condition.width), ..model_config }),
            init,
            reference,
            resume: rc.path("resume")?,
            log_every: rc.require("log_every")?,
        },
    )?;
    if let Some(ck) = &outcome.checkpoint {
        println!("wrote {}", ck.display());
    }
    Ok(())
}

fn sampler_config(rc: &RunConfig) -> Result<SamplerConfig> {
    let cfg = SamplerConfig {
        steps: rc.get_or("steps", SamplerConfig::default().steps)?,
        cfg_scale: rc.require("cfg_scale")?,
        cfg_geometry: rc.flag("cfg_geometry")?,
        steer_texture_always: rc.flag("steer_texture_always")?,
        seed: rc.require("seed")?,
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn edit_models(rc: &RunConfig) -> Result<EditModels> {
    let need = |key: &str, stage: Stage| -> Result<FlowModel> {
        let path = rc
            .path(key)?
            .ok_or_else(|| Error::MissingPrerequisite(format!("--{} is required", key.replace('_', "-"))))?;
        load_model(&path, stage)
    };
    Ok(EditModels { geometry: need("geometry_ckpt", Stage::Geometry)?, texture: need("texture_ckpt", Stage::Texture)? })
}

#[derive(Serialize)]
struct EditRecord {
    scene_seed: u64,
    instruction: Option<String>,
    sample_seed: u64,
    config_hash: String,
    geometry_ms: f64,
    texture_ms: f64,
    occupied: usize,
}

pub fn edit(rc: &RunConfig) -> Result<()> {
    let sampler = sampler_config(rc)?;
    let instruction = rc.string("instruction")?.map(|s| EditInstruction::parse_spec(&s)).transpose()?;
    let scene_seed: u64 = rc.require("scene_seed")?;
    let out = out_path(rc)?;
    let models = edit_models(rc)?;
    let scene = SceneGraph::generate(scene_seed);
    if let Some(instr) = &instruction {
        instr.validate_for(&scene)?;
    }
    let cfg = &models.geometry.config;
    let source = build_asset(&scene, cfg.grid)?;
    let condition = render_ortho(&source, View::Front, cfg.view);
    let seed = derive_seed(sampler.seed ^ scene_seed, stream::SAMPLE, 0);
    let (mut results, timings) = edit_assets(&[EditRequest { condition: &condition, instruction, seed }], &models, &sampler)?;
    let asset: VoxelAsset = results.pop().expect("one result per request")?;

    fs::create_dir_all(&out)?;
    write(&out.join("result.vxdb"), write_voxel_debug(&asset))?;
    for view in View::ALL {
        write(&out.join(format!("view_{}.ppm", view.name())), write_ppm(&render_ortho(&asset, view, cfg.view)))?;
    }
    let deterministic = rc.flag("deterministic")?;
    let record = EditRecord {
        scene_seed,
        instruction: instruction.map(|i| i.to_spec()),
        sample_seed: seed,
        config_hash: config_hash(rc),
        geometry_ms: if deterministic { 0.0 } else { timings.geometry_ms },
        texture_ms: if deterministic { 0.0 } else { timings.texture_ms },
        occupied: asset.occupied_count(),
    };
    write(&out.join("edit.json"), serde_json::to_string_pretty(&record).expect("record serializes") + "\n")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn read_predictions(dir: &Path, records: &[EditPairRecord]) -> Result<Vec<Result<VoxelAsset>>> {
    if !dir.is_dir() {
        return Err(Error::MissingPrerequisite(format!("prediction directory {} not found", dir.display())));
    }
    Ok((0..records.len())
        .map(|i| {
            let path = dir.join(format!("{i:05}.vxdb"));
            let bytes = fs::read(&path).map_err(|e| Error::MissingPrerequisite(format!("{}: {e}", path.display())))?;
            read_voxel_debug(&bytes)
        })
        .collect())
}

pub fn eval(rc: &RunConfig) -> Result<()> {
    let splits = match rc.string("splits")? {
        None => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|v| Split::parse(v.trim()).ok_or_else(|| bad(format!("invalid split {v}"))))
            .collect::<Result<_>>()?,
    };
    let icp = match rc.require::<String>("icp")?.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(bad(format!("icp must be on or off, got {other}"))),
    };
    let bench = BenchConfig {
        points: rc.require("points")?,
        tau: rc.require("f1_tau")?,
        icp,
        no_edit_threshold: rc.require("no_edit_threshold")?,
        splits,
        seed: rc.require("seed")?,
        ..BenchConfig::default()
    };
    bench.validate()?;
    let data = rc.path("data")?.ok_or_else(|| bad("--data is required"))?;
    let mut records = load_records(&data)?;
    if let Some(limit) = rc.get::<usize>("limit")? {
        records.truncate(limit);
    }
    let bench = BenchConfig { view_size: records.first().map_or(bench.view_size, |r| r.condition.width), ..bench };
    let out = out_path(rc)?;
    let source = rc.string("predictions")?.unwrap_or_else(|| "model".into());
    let (predictions, sampler) = match source.as_str() {
        "model" => {
            let sampler = sampler_config(rc)?;
            (predict(&records, &edit_models(rc)?, &sampler, &bench)?, Some(sampler))
        }
        "gt" => (records.iter().map(|r| Ok(r.edited.clone())).collect(), None),
        "source" => (records.iter().map(|r| Ok(r.source.clone())).collect(), None),
        dir => (read_predictions(Path::new(dir), &records)?, None),
    };
    let report = evaluate_predictions(&records, &predictions, &bench, sampler)?;

    fs::create_dir_all(&out)?;
    write(&out.join("report.json"), report.to_json() + "\n")?;
    write(&out.join("rows.csv"), report.rows_csv())?;
    write(&out.join("aggregates.csv"), report.aggregates_csv())?;
    if let Some(plot) = rc.path("plot_data")? {
        let size = rc.get::<usize>("dataset_size")?.unwrap_or(records.len());
        write(&plot, plot_rows(&[(size, &report)]))?;
    }
    let all = report.overall();
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} examples: chamfer {} f1 {} iou {} no-edit {} failures {}",
        all.count,
        show(all.chamfer),
        show(all.f1),
        show(all.iou),
        show(all.no_edit_rate),
        all.failures
    );
    Ok(())
}

pub fn plot_data(rc: &RunConfig) -> Result<()> {
    let entries = rc.string("reports")?.ok_or_else(|| bad("--reports is required"))?;
    let mut reports = Vec::new();
    for entry in entries.split(',') {
        let (size, path) = entry.split_once('=').ok_or_else(|| bad(format!("expected SIZE=REPORT.json, got {entry}")))?;
        let size: usize = size.trim().parse().map_err(|_| bad(format!("invalid dataset size {size}")))?;
        let text = fs::read_to_string(path.trim())
            .map_err(|e| Error::MissingPrerequisite(format!("cannot read report {}: {e}", path.trim())))?;
        let report: MetricReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.trim())))?;
        report.verify()?;
        reports.push((size, report));
    }
    reports.sort_by_key(|(size, _)| *size);
    let points: Vec<(usize, &MetricReport)> = reports.iter().map(|(s, r)| (*s, r)).collect();
    let out = out_path(rc)?;
    write(&out, plot_rows(&points))?;
    println!("wrote {}", out.display());
    Ok(())
}
