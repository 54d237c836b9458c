use std::path::Path;
use std::process::{Command, Output};
use voxsteer_core::config::REGISTRY;
use voxsteer_core::voxel::{read_voxel_debug, write_voxel_debug, VoxelAsset};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxsteer")).args(args).env_remove("VOXSTEER_CONFIG").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen(dir: &Path, name: &str, pairs: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let mut args = vec!["gen-data", "--pairs", pairs, "--grid", "8", "--view-size", "8", "--q", "0", "--seed", "3", "--out", &path];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn overall<'a>(r: &'a serde_json::Value, field: &str) -> &'a serde_json::Value {
    &r["aggregates"].as_array().unwrap().last().unwrap()[field]
}

#[test]
fn help_lists_every_key() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for k in REGISTRY {
        assert!(text.contains(k.key), "help is missing {}", k.key);
    }
    let out = run(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--allow-geometry-dpo") && text.contains("--t-std"));
}

#[test]
fn invalid_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.vsdp").to_string_lossy().into_owned();
    assert_eq!(code(&run(&["gen-data", "--pairs", "0", "--out", &out])), 2);
    assert_eq!(code(&run(&["gen-data", "--q", "1.5", "--out", &out])), 2);
    assert_eq!(code(&run(&["gen-data", "--no-such-flag", "1"])), 2);
    assert_eq!(code(&run(&["train", "--phase", "dpo", "--stage", "geometry", "--out", &out])), 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn missing_prerequisites_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.vsdp", "24", &[]);
    let out = dir.path().join("run").to_string_lossy().into_owned();
    assert_eq!(code(&run(&["train", "--phase", "sft", "--stage", "texture", "--data", &data, "--out", &out])), 3);
    let missing = dir.path().join("nope.vsck").to_string_lossy().into_owned();
    let args = ["edit", "--geometry-ckpt", &missing, "--texture-ckpt", &missing, "--out", &out];
    assert_eq!(code(&run(&args)), 3);
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# toy data\npairs = 0\ngrid = 8\nview-size = 8\nq = 0\n").unwrap();
    let out = dir.path().join("d.vsdp").to_string_lossy().into_owned();
    let c = cfg.to_string_lossy().into_owned();
    assert_eq!(code(&run(&["gen-data", "--config", &c, "--out", &out])), 2);
    let ok = Command::new(env!("CARGO_BIN_EXE_voxsteer"))
        .args(["gen-data", "--pairs", "6", "--out", &out])
        .env("VOXSTEER_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{out}.json")).unwrap()).unwrap();
    assert_eq!(manifest["grid"], 8);
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&run(&["gen-data", "--config", &c, "--out", &out])), 2);
}

#[test]
fn reference_predictions_and_split_filter() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.vsdp", "24", &["--weights", "0,0,1"]);
    let eval = |preds: &str, extra: &[&str]| {
        let out = dir.path().join(format!("eval-{preds}-{}", extra.len()));
        let o = out.to_string_lossy().into_owned();
        let mut args = vec!["eval", "--data", &data, "--predictions", preds, "--points", "128", "--out", &o];
        args.extend_from_slice(extra);
        let res = run(&args);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let source = report(&eval("source", &[]));
    assert_eq!(overall(&source, "no_edit_rate").as_f64(), Some(1.0));
    let gt = report(&eval("gt", &[]));
    assert_eq!(overall(&gt, "chamfer").as_f64(), Some(0.0));
    assert_eq!(overall(&gt, "no_edit_rate").as_f64(), Some(0.0));

    let kept = report(&eval("gt", &["--splits", "train"]));
    assert!(!kept["rows"].as_array().unwrap().is_empty());
    let none = report(&eval("gt", &["--splits", "unseen-asset,seen-unseen-edit"]));
    assert!(none["rows"].as_array().unwrap().is_empty());
}

fn shifted(a: &VoxelAsset, dx: usize) -> VoxelAsset {
    let g = a.grid();
    let mut out = VoxelAsset::empty(g);
    for i in 0..g * g * g {
        let (x, y, z) = a.coords(i);
        if a.is_occupied(i) && x + dx < g {
            out.set(x + dx + g * (y + g * z), Some(a.color(i)));
        }
    }
    out
}

#[test]
fn icp_realigns_misposed_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.vsdp", "6", &["--weights", "0,0,1"]);
    let bytes = std::fs::read(&data).unwrap();
    let (_, records) = voxsteer_core::data::read_dataset(&bytes[..]).unwrap();
    let preds = dir.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    for (i, r) in records.iter().enumerate() {
        let moved = shifted(&r.edited, 1);
        assert!(moved.occupied_count() > 0);
        std::fs::write(preds.join(format!("{i:05}.vxdb")), write_voxel_debug(&moved)).unwrap();
        assert_eq!(read_voxel_debug(&write_voxel_debug(&moved)).unwrap(), moved);
    }
    let p = preds.to_string_lossy().into_owned();
    let chamfer = |icp: &str| {
        let out = dir.path().join(format!("eval-{icp}"));
        let o = out.to_string_lossy().into_owned();
        let res = run(&["eval", "--data", &data, "--predictions", &p, "--icp", icp, "--points", "256", "--out", &o]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        overall(&report(&out), "chamfer").as_f64().unwrap()
    };
    let (off, on) = (chamfer("off"), chamfer("on"));
    assert!(on < 0.5 * off, "icp {on} vs raw {off}");
}

#[test]
fn plot_data_merges_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.vsdp", "24", &[]);
    let mut entries = Vec::new();
    for (size, preds) in [(1000, "source"), (500, "gt")] {
        let out = dir.path().join(preds);
        let o = out.to_string_lossy().into_owned();
        assert_eq!(code(&run(&["eval", "--data", &data, "--predictions", preds, "--points", "64", "--out", &o])), 0);
        entries.push(format!("{size}={}", out.join("report.json").display()));
    }
    let csv = dir.path().join("curve.csv");
    let c = csv.to_string_lossy().into_owned();
    let res = run(&["plot-data", "--reports", &entries.join(","), "--out", &c]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let sizes: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(sizes.first() == Some(&"500") && sizes.last() == Some(&"1000"));
}
