use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egfs_cli::commands::{parse_poses, POSES_HEADER};
use egfs_core::synth::read_dataset;

const SMALL: &str = r#"
seed = 3

[scene]
n_train_frames = 10
n_test_frames = 3
width = 96
height = 64
focal = 80.0

[train]
epochs_total = 4
epochs_per_iteration = 1
batch_size = 128

[train.architecture]
width = 16
depth = 2
conf_hidden = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_egfs-loc"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn cat<'a>(a: &[&'a str], b: &[&'a str]) -> Vec<&'a str> {
    a.iter().chain(b).copied().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn work(config: &str) -> Work {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Work { data: root.join("data"), config: cfg, root, _dir: dir }
}

fn with_data(config: &str) -> Work {
    let w = work(config);
    ok(&["--config", s(&w.config), "--out", s(&w.data), "gen-data"]);
    w
}

#[test]
fn gen_data_writes_a_readable_dataset() {
    let w = with_data(SMALL);
    let d = read_dataset(&w.data).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (10, 3));
    assert_eq!(d.scene.config.seed, 3);
    assert!(w.data.join("config.resolved.toml").is_file());
}

#[test]
fn command_line_seed_wins_over_file() {
    let w = work(SMALL);
    ok(&["--config", s(&w.config), "--seed", "11", "--out", s(&w.data), "gen-data"]);
    let resolved = fs::read_to_string(w.data.join("config.resolved.toml")).unwrap();
    let v: toml::Table = toml::from_str(&resolved).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(11));
    assert_eq!(v["scene"]["seed"].as_integer(), Some(11));
    assert_eq!(v["train"]["seed"].as_integer(), Some(11));
    assert_eq!(v["ransac"]["seed"].as_integer(), Some(11));
    assert_eq!(read_dataset(&w.data).unwrap().scene.config.seed, 11);
}

#[test]
fn usage_errors_exit_with_two() {
    let bad = work(&SMALL.replace("[scene]\n", "[scene]\ndynamic_fraction = 1.5\n"));
    let o = run(&["--config", s(&bad.config), "--out", s(&bad.data), "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dynamic_fraction"));

    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let unknown = work("sed = 1\n");
    let o = run(&["--config", s(&unknown.config), "--out", s(&unknown.data), "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));

    let o = run(&["--mode", "quantile:1.5", "--out", "x", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let w = with_data(SMALL);
    let out = w.root.join("run");
    let o = run(&["--config", s(&w.config), "--dataset", s(&w.data), "--out", s(&out), "localize"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn corrupt_dataset_is_a_runtime_error() {
    let w = with_data(SMALL);
    fs::write(w.data.join("grids").join("0.bin"), b"junk").unwrap();
    let o = run(&["--config", s(&w.config), "--dataset", s(&w.data), "--out", s(&w.root.join("run")), "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_artifacts() {
    let w = with_data(SMALL);
    let out = w.root.join("run");
    let common = ["--config", s(&w.config), "--dataset", s(&w.data), "--out", s(&out)];

    ok(&cat(&common, &["train"]));
    assert!(out.join("checkpoint.bin").is_file());
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);
    for it in 2..=4 {
        let dir = out.join("masks").join(format!("iter{it}"));
        assert_eq!(fs::read_dir(&dir).unwrap().count(), 10, "{}", dir.display());
        assert!(out.join("prompts").join(format!("iter{it}.csv")).is_file());
    }
    assert!(!out.join("masks").join("iter1").exists());
    let audit = fs::read_to_string(out.join("mask_audit.csv")).unwrap();
    assert_eq!(audit.lines().count(), 1 + 3);

    ok(&cat(&common, &["localize"]));
    let poses = fs::read_to_string(out.join("poses.csv")).unwrap();
    assert_eq!(poses.lines().next(), Some(POSES_HEADER));
    assert_eq!(parse_poses(&poses).unwrap().len(), 3);
    assert!(out.join("timing.csv").is_file());

    ok(&cat(&common, &["eval"]));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 3);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);

    ok(&cat(&common, &["analyze"]));
    let regions = fs::read_to_string(out.join("regions.csv")).unwrap();
    assert!(regions.starts_with("label,count,median_error_px,inlier_ratio"));

    let count = |text: String| -> usize { text.trim().strip_prefix("wrote ").unwrap().strip_suffix(" points").unwrap().parse().unwrap() };
    let all = count(ok(&cat(&common, &["export-cloud"])));
    let masks = out.join("masks").join("iter4");
    let filtered = count(ok(&cat(&common, &["export-cloud", "--filter", "--masks", s(&masks)])));
    assert!(filtered < all, "{filtered} vs {all}");
    let ply = fs::read_to_string(out.join("cloud.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
}

#[test]
fn ground_truth_poses_evaluate_to_zero() {
    let w = with_data(SMALL);
    let d = read_dataset(&w.data).unwrap();
    let mut csv = format!("{POSES_HEADER}\n");
    for f in &d.test {
        let q = f.pose_gt.quaternion_wxyz();
        let t = f.pose_gt.translation;
        csv.push_str(&format!(
            "{},{:.15},{:.15},{:.15},{:.15},{:.15},{:.15},{:.15},100,100,1,1\n",
            f.frame_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z
        ));
    }
    let poses = w.root.join("gt.csv");
    fs::write(&poses, csv).unwrap();
    let out = w.root.join("eval");
    ok(&["--dataset", s(&w.data), "--out", s(&out), "eval", "--poses", s(&poses)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["median_cm"].as_f64().unwrap() < 1e-9);
    assert!(summary["median_deg"].as_f64().unwrap() < 1e-9);
    assert_eq!(summary["pct_within_5cm_5deg"].as_f64(), Some(100.0));
}

#[test]
fn tau_sweep_needs_egfs_mode() {
    let w = with_data(SMALL);
    let o = run(&["--config", s(&w.config), "--dataset", s(&w.data), "--out", s(&w.root.join("r")), "--mode", "random", "train", "--tau-sweep"]);
    assert_eq!(o.status.code(), Some(2));
}
