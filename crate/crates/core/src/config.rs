//! Flat `key = value` run configuration with a registry of every key.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "VOXSTEER_CONFIG";

pub const CMD_GEN_DATA: &str = "gen-data";
pub const CMD_TRAIN: &str = "train";
pub const CMD_EDIT: &str = "edit";
pub const CMD_EVAL: &str = "eval";
pub const CMD_PLOT: &str = "plot-data";
pub const COMMANDS: [&str; 5] = [CMD_GEN_DATA, CMD_TRAIN, CMD_EDIT, CMD_EVAL, CMD_PLOT];

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    /// Commands that read the key; empty means every command.
    pub commands: &'static [&'static str],
    /// Default shown in help; empty when the default depends on other keys
    /// or the key is optional.
    pub default: &'static str,
    pub help: &'static str,
}

impl KeySpec {
    pub fn flag(&self) -> String {
        self.key.replace('_', "-")
    }

    pub fn used_by(&self, command: &str) -> bool {
        self.commands.is_empty() || self.commands.contains(&command)
    }
}

const ALL: &[&str] = &[];
const GEN: &[&str] = &[CMD_GEN_DATA];
const TRAIN: &[&str] = &[CMD_TRAIN];
const EDIT: &[&str] = &[CMD_EDIT];
const EVAL: &[&str] = &[CMD_EVAL];
const PLOT: &[&str] = &[CMD_PLOT];
const GEN_TRAIN: &[&str] = &[CMD_GEN_DATA, CMD_TRAIN];
const TRAIN_EDIT_EVAL: &[&str] = &[CMD_TRAIN, CMD_EDIT, CMD_EVAL];
const EDIT_EVAL: &[&str] = &[CMD_EDIT, CMD_EVAL];
const TRAIN_EVAL: &[&str] = &[CMD_TRAIN, CMD_EVAL];

macro_rules! keys {
    ($($key:literal, $cmds:expr, $default:literal, $help:literal;)*) => {
        pub const REGISTRY: &[KeySpec] = &[$(KeySpec { key: $key, commands: $cmds, default: $default, help: $help }),*];
    };
}

keys! {
    "seed", ALL, "0", "global seed; every random stream derives from it";
    "deterministic", ALL, "true", "byte-reproducible output (timings recorded as 0 where they would leak into artifacts)";
    "threads", ALL, "", "worker threads (default: all cores)";
    "out", ALL, "", "output path (file for gen-data and plot-data, directory otherwise)";
    "pairs", GEN, "1000", "edit pairs to attempt before filtering";
    "per_scene", GEN, "4", "training instructions proposed per scene";
    "held_out_edits", GEN, "2", "extra instructions per scene reserved for the seen-unseen-edit split";
    "q", GEN, "0.7", "corruption probability of a generated edit";
    "tau", GEN, "0.01", "consistency filter threshold on masked multi-view MSE";
    "weights", GEN, "1,1,1", "category weights: addition,removal,texture";
    "grid", GEN_TRAIN, "16", "voxel grid resolution";
    "view_size", GEN, "32", "render width in pixels";
    "view", GEN, "front", "view rendered as the condition image";
    "split", GEN, "train", "train | seen-unseen-edit | unseen-asset";
    "data", TRAIN_EVAL, "", "dataset file";
    "phase", TRAIN, "", "base-pretrain | sft | dpo";
    "stage", TRAIN, "", "geometry | texture";
    "lr", TRAIN, "", "learning rate (phase default when unset)";
    "batch", TRAIN, "8", "examples per micro-batch";
    "accum", TRAIN, "", "gradient accumulation steps (phase default when unset)";
    "clip", TRAIN, "1.0", "global gradient norm clip";
    "t_mean", TRAIN, "1.0", "logit-normal timestep mean";
    "t_std", TRAIN, "", "logit-normal timestep std (phase default when unset)";
    "p_uncond", TRAIN, "", "instruction dropout probability (texture sft only)";
    "beta", TRAIN, "0.2", "DPO temperature";
    "alpha", TRAIN, "1.0", "weight of the supervised term in the DPO loss";
    "weight_decay", TRAIN, "0.01", "AdamW weight decay on weight matrices";
    "steps", TRAIN_EDIT_EVAL, "", "optimizer steps (train, default 2000 or 500 for dpo) or Euler steps (edit/eval, default 25)";
    "val_every", TRAIN, "200", "validation interval in steps (0 disables)";
    "val_batch", TRAIN, "16", "validation batch size";
    "checkpoint_every", TRAIN, "0", "periodic checkpoint interval (0: final only)";
    "allow_geometry_dpo", TRAIN, "false", "permit DPO on the geometry stage";
    "init", TRAIN, "", "starting checkpoint (required for sft and dpo)";
    "reference", TRAIN, "", "DPO reference checkpoint (default: init)";
    "resume", TRAIN, "", "trainer checkpoint to continue from";
    "log_every", TRAIN, "100", "progress print interval (0: silent)";
    "width", TRAIN, "64", "transformer width";
    "heads", TRAIN, "4", "attention heads";
    "blocks", TRAIN, "4", "transformer blocks";
    "patch", TRAIN, "4", "voxel patch edge";
    "image_patch", TRAIN, "8", "image patch edge";
    "geometry_ckpt", EDIT_EVAL, "", "geometry-stage checkpoint";
    "texture_ckpt", EDIT_EVAL, "", "texture-stage checkpoint";
    "cfg_scale", EDIT_EVAL, "3.0", "guidance scale";
    "cfg_geometry", EDIT_EVAL, "false", "apply guidance in the geometry stage";
    "steer_texture_always", EDIT_EVAL, "false", "steer the texture stage for geometry edits too";
    "scene_seed", EDIT, "0", "procedural scene to edit";
    "instruction", EDIT, "", "edit instruction, e.g. texture:slot=0:color=3";
    "points", EVAL, "1024", "surface points per asset";
    "f1_tau", EVAL, "0.05", "F1 threshold in unit-cube coordinates";
    "icp", EVAL, "off", "on | off: align predictions to ground truth before Chamfer and F1";
    "no_edit_threshold", EVAL, "0.1", "relative change below which a prediction counts as no edit";
    "splits", EVAL, "", "comma-separated splits to evaluate (default: all)";
    "predictions", EVAL, "", "model (default), gt, source, or a directory of NNNNN.vxdb files";
    "limit", EVAL, "", "evaluate at most this many records";
    "plot_data", EVAL, "", "also write a scaling-curve CSV row set to this path";
    "dataset_size", EVAL, "", "dataset size recorded in --plot-data output";
    "reports", PLOT, "", "comma-separated SIZE=REPORT.json entries";
}

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|k| k.key == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().replace('-', "_");
        if spec(&k).is_none() {
            return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Merged configuration for one command.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Layers `file` values under `flags`; both must use registered keys.
    pub fn merge(command: &str, file: BTreeMap<String, String>, flags: BTreeMap<String, String>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, v) in file.into_iter().chain(flags) {
            if spec(&k).is_none() {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
            values.insert(k, v);
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    fn checked(&self, key: &str) -> Result<&'static KeySpec> {
        spec(key).ok_or_else(|| Error::Config(format!("internal: key '{key}' is not registered")))
    }

    /// The explicit value, if any.
    pub fn raw(&self, key: &str) -> Result<Option<&str>> {
        self.checked(key)?;
        Ok(self.values.get(key).map(String::as_str))
    }

    /// The explicit value or the registered default.
    pub fn string(&self, key: &str) -> Result<Option<String>> {
        let s = self.checked(key)?;
        Ok(self
            .values
            .get(key)
            .cloned()
            .or_else(|| (!s.default.is_empty()).then(|| s.default.to_string())))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.string(key)? {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {}", key.replace('_', "-")))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required --{}", key.replace('_', "-"))))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(fallback))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.string(key)?.as_deref() {
            None | Some("false" | "off" | "0" | "no") => Ok(false),
            Some("true" | "on" | "1" | "yes") => Ok(true),
            Some(v) => Err(Error::Config(format!("invalid boolean '{v}' for {}", key.replace('_', "-")))),
        }
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    /// Explicit values, for echoing into artifacts.
    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
