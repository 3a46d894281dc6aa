use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use egfs_core::egfs::{self, EgfsMask, RegionExpander, SamplingMode, TrainingOutput};
use egfs_core::eval::{self, FrameLocalization, PoseError, Summary};
use egfs_core::geometry::Pose;
use egfs_core::regressor::{self, RegressorParams, TrainConfig};
use egfs_core::synth::{self, write_atomic, Dataset, Frame, RegionLabel};
use nalgebra::Vector3;
use serde::Serialize;

use crate::config::{Resolved, RESOLVED_NAME};
use crate::UsageError;

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const LOSS_NAME: &str = "loss.csv";
pub const AUDIT_NAME: &str = "mask_audit.csv";
pub const POSES_NAME: &str = "poses.csv";
pub const TIMING_NAME: &str = "timing.csv";
pub const METRICS_NAME: &str = "metrics.csv";
pub const SUMMARY_NAME: &str = "summary.json";
pub const REGIONS_NAME: &str = "regions.csv";
pub const CLOUD_NAME: &str = "cloud.ply";
pub const SWEEP_NAME: &str = "tau_sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref()).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(r: &Resolved) -> Result<PathBuf> {
    let out = r.out()?.to_path_buf();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(RESOLVED_NAME), r.config.to_toml())?;
    Ok(out)
}

fn load_dataset(r: &Resolved) -> Result<Dataset> {
    let path = r.dataset()?;
    if !path.join("scene.json").is_file() {
        return Err(UsageError(format!("{} is not a dataset directory", path.display())).into());
    }
    synth::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn split(d: &Dataset, s: Split) -> &[Frame] {
    match s {
        Split::Train => &d.train,
        Split::Test => &d.test,
    }
}

fn load_params(r: &Resolved) -> Result<RegressorParams> {
    let path = r.checkpoint()?;
    regressor::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn label_counts(frames: &[Frame]) -> [usize; 3] {
    let mut n = [0; 3];
    for f in frames {
        for l in &f.grid.labels {
            n[l.as_u8() as usize] += 1;
        }
    }
    n
}

pub fn gen_data(r: &Resolved) -> Result<()> {
    let out = r.out()?.to_path_buf();
    let (scene, train, test) = synth::generate_scene(&r.config.scene)?;
    let frames: Vec<Frame> = train.iter().chain(&test).cloned().collect();
    synth::write_dataset(&out, &scene, &frames).with_context(|| format!("writing dataset {}", out.display()))?;
    write(&out.join(RESOLVED_NAME), r.config.to_toml())?;
    for (name, fs) in [("train", &train), ("test", &test)] {
        let n = label_counts(fs);
        let total: usize = n.iter().sum();
        let parts: Vec<String> = RegionLabel::ALL
            .iter()
            .map(|l| {
                let c = n[l.as_u8() as usize];
                format!("{} {c} ({:.1}%)", l.name(), 100.0 * c as f64 / total.max(1) as f64)
            })
            .collect();
        println!("{name}: {} frames, {total} patches: {}", fs.len(), parts.join(", "));
    }
    Ok(())
}

fn train_one(
    frames: &[Frame],
    d: &Dataset,
    cfg: &TrainConfig,
    expander: &RegionExpander,
    mode: SamplingMode,
) -> Result<TrainingOutput> {
    egfs::run_training(frames, d.scene.scene_center, d.scene.scene_radius, cfg, expander, mode).map_err(|e| match e {
        egfs::EgfsError::Regressor(regressor::RegressorError::Config(m)) => UsageError(m).into(),
        other => anyhow::Error::new(other).context("training failed"),
    })
}

fn write_training(out: &Path, output: &TrainingOutput) -> Result<()> {
    regressor::save_checkpoint(&out.join(CHECKPOINT_NAME), &output.params)?;
    let mut loss = Vec::new();
    regressor::write_loss_rows(&mut loss, &output.loss_rows(), true)?;
    write(&out.join(LOSS_NAME), loss)?;
    let mut audit = String::from(
        "iteration,masked,masked_fraction,dynamic_fraction,textureless_fraction,static_fraction,refine_fallbacks,buffer_len\n",
    );
    for it in &output.iterations {
        if let Some(a) = &it.audit {
            writeln!(
                audit,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                it.iteration,
                a.masked,
                a.masked as f64 / a.total.max(1) as f64,
                a.dynamic_fraction(),
                a.textureless_fraction(),
                a.static_fraction(),
                it.refine_fallbacks,
                it.buffer_len
            )?;
        }
        if !it.masks.is_empty() {
            let dir = out.join("masks").join(format!("iter{}", it.iteration));
            fs::create_dir_all(&dir)?;
            for m in &it.masks {
                egfs::write_pbm(&dir.join(format!("{}.pbm", m.frame_id)), m)?;
            }
        }
        if !it.prompts.is_empty() {
            let dir = out.join("prompts");
            fs::create_dir_all(&dir)?;
            let mut csv = Vec::new();
            egfs::write_prompts_csv(&mut csv, &it.error_maps, &it.prompts)?;
            write(&dir.join(format!("iter{}.csv", it.iteration)), csv)?;
        }
    }
    write(&out.join(AUDIT_NAME), audit)?;
    Ok(())
}

pub fn train(r: &Resolved, tau_sweep: bool) -> Result<()> {
    let d = load_dataset(r)?;
    let out = out_dir(r)?;
    if tau_sweep {
        return sweep(r, &d, &out);
    }
    let output = train_one(&d.train, &d, &r.config.train, &r.expander, r.mode)?;
    write_training(&out, &output)?;
    let last = output.loss_rows().last().map(|(_, _, s)| *s);
    if let Some(s) = last {
        println!(
            "trained {} iterations ({}), final loss {:.4}, valid {:.3}",
            output.iterations.len(),
            r.mode,
            s.mean_loss,
            s.valid_fraction
        );
    }
    Ok(())
}

/// Trains once per prompt percentage and compares test-set accuracy.
fn sweep(r: &Resolved, d: &Dataset, out: &Path) -> Result<()> {
    if r.mode != SamplingMode::Egfs {
        return Err(UsageError("the tau sweep needs mode egfs".into()).into());
    }
    let mut csv = String::from("tau_pct,median_cm,median_deg,pct_within_5cm_5deg\n");
    for &tau in &r.config.tau_sweep {
        let cfg = TrainConfig { tau_prompt_pct: tau, ..r.config.train };
        let output = train_one(&d.train, d, &cfg, &r.expander, r.mode)?;
        let dir = out.join(format!("tau{tau}"));
        fs::create_dir_all(&dir)?;
        write_training(&dir, &output)?;
        let res = eval::localize_frames(&output.params, &d.test, &r.config.ransac, r.config.confidence_filter);
        let row = match eval::aggregate(&eval::frame_errors(&d.test, &res)) {
            Some(s) => format!("{tau},{:.6},{:.6},{:.2}", s.median_cm, s.median_deg, s.pct_within_5cm_5deg),
            None => format!("{tau},,,"),
        };
        println!("tau {tau}: {row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    write(&out.join(SWEEP_NAME), csv)
}

fn pose_row(f: &FrameLocalization) -> String {
    let q = f.estimate.pose.quaternion_wxyz();
    let t = f.estimate.pose.translation;
    format!(
        "{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{},{},{},{}",
        f.frame_id,
        q[0],
        q[1],
        q[2],
        q[3],
        t.x,
        t.y,
        t.z,
        f.estimate.inliers.len(),
        f.n_correspondences,
        u8::from(f.estimate.converged),
        u8::from(f.filtered)
    )
}

pub const POSES_HEADER: &str = "frame_id,qw,qx,qy,qz,tx,ty,tz,n_inliers,n_corr,converged,filtered";

pub fn localize(r: &Resolved, which: Split) -> Result<()> {
    let params = load_params(r)?;
    let d = load_dataset(r)?;
    let out = out_dir(r)?;
    let frames = split(&d, which);
    let res = eval::localize_frames(&params, frames, &r.config.ransac, r.config.confidence_filter);
    let mut poses = format!("{POSES_HEADER}\n");
    let mut timing = String::from("frame_id,seconds\n");
    let mut unconverged = 0;
    for f in &res {
        poses.push_str(&pose_row(f));
        poses.push('\n');
        writeln!(timing, "{},{:.6}", f.frame_id, f.seconds)?;
        if !f.estimate.converged {
            unconverged += 1;
            log::warn!("frame {} did not converge ({} inliers)", f.frame_id, f.estimate.inliers.len());
        }
    }
    write(&out.join(POSES_NAME), poses)?;
    write(&out.join(TIMING_NAME), timing)?;
    println!("localized {} frames, {unconverged} unconverged", res.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRow {
    pub frame_id: u32,
    pub pose: Pose,
    pub n_inliers: usize,
    pub n_corr: usize,
    pub converged: bool,
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(POSES_HEADER) {
        bail!("poses file must start with `{POSES_HEADER}`");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            bail!("line {}: expected 12 fields, got {}", i + 2, f.len());
        }
        let num = |k: usize| -> Result<f64> { f[k].parse().with_context(|| format!("line {}: field {}", i + 2, k + 1)) };
        let int = |k: usize| -> Result<usize> { f[k].parse().with_context(|| format!("line {}: field {}", i + 2, k + 1)) };
        rows.push(PoseRow {
            frame_id: int(0)? as u32,
            pose: Pose::from_quaternion([num(1)?, num(2)?, num(3)?, num(4)?], Vector3::new(num(5)?, num(6)?, num(7)?)),
            n_inliers: int(8)?,
            n_corr: int(9)?,
            converged: int(10)? != 0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct SummaryFile {
    #[serde(flatten)]
    summary: Option<Summary>,
    unconverged: usize,
}

pub fn evaluate(r: &Resolved, poses: Option<&Path>) -> Result<Summary> {
    let d = load_dataset(r)?;
    let out = out_dir(r)?;
    let path = poses.map_or_else(|| out.join(POSES_NAME), Path::to_path_buf);
    let text = fs::read_to_string(&path).map_err(|e| UsageError(format!("cannot read poses {}: {e}", path.display())))?;
    let rows = parse_poses(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut metric_rows = Vec::with_capacity(rows.len());
    for row in &rows {
        let Some(frame) = d.train.iter().chain(&d.test).find(|f| f.frame_id == row.frame_id) else {
            bail!("frame {} is not in the dataset", row.frame_id);
        };
        let e: PoseError = eval::pose_error(&row.pose, &frame.pose_gt);
        metric_rows.push((row.frame_id, e, row.n_inliers, row.n_corr));
    }
    let mut csv = Vec::new();
    eval::write_metrics_csv(&mut csv, &metric_rows)?;
    write(&out.join(METRICS_NAME), csv)?;
    let errors: Vec<PoseError> = metric_rows.iter().map(|r| r.1).collect();
    let summary = eval::aggregate(&errors);
    let file = SummaryFile { summary, unconverged: rows.iter().filter(|r| !r.converged).count() };
    write(&out.join(SUMMARY_NAME), serde_json::to_string_pretty(&file)? + "\n")?;
    let Some(s) = summary else { bail!("no poses to evaluate in {}", path.display()) };
    println!(
        "{} frames: median {:.2} cm / {:.3} deg, {:.1}% within 5 cm / 5 deg",
        s.frames, s.median_cm, s.median_deg, s.pct_within_5cm_5deg
    );
    Ok(s)
}

pub fn analyze(r: &Resolved, which: Split) -> Result<()> {
    let params = load_params(r)?;
    let d = load_dataset(r)?;
    let out = out_dir(r)?;
    let frames = split(&d, which);
    let res = eval::localize_frames(&params, frames, &r.config.ransac, r.config.confidence_filter);
    let stats = eval::region_analysis(&params, frames, &res);
    let mut csv = Vec::new();
    eval::write_region_csv(&mut csv, &stats)?;
    write(&out.join(REGIONS_NAME), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn read_masks(dir: &Path, frames: &[Frame]) -> Result<Vec<EgfsMask>> {
    let mut masks = Vec::new();
    for f in frames {
        let path = dir.join(format!("{}.pbm", f.frame_id));
        if !path.exists() {
            continue;
        }
        let (rows, cols, cells) = egfs::read_pbm(&path)?;
        if (rows, cols) != (f.grid.rows, f.grid.cols) {
            bail!("mask {} is {rows}x{cols}, grid is {}x{}", path.display(), f.grid.rows, f.grid.cols);
        }
        masks.push(EgfsMask { frame_id: f.frame_id, rows, cols, cells, iteration: 0, expander: "file".into() });
    }
    Ok(masks)
}

pub fn export_cloud(r: &Resolved, which: Split, filter: bool, masks: Option<&Path>) -> Result<usize> {
    let params = load_params(r)?;
    let d = load_dataset(r)?;
    let out = out_dir(r)?;
    let frames = split(&d, which);
    let masks = match masks {
        Some(dir) if !dir.is_dir() => return Err(UsageError(format!("mask directory {} does not exist", dir.display())).into()),
        Some(dir) => Some(read_masks(dir, frames)?),
        None => None,
    };
    let mut ply = Vec::new();
    let n = eval::export_point_cloud(&mut ply, &params, frames, filter, masks.as_deref())?;
    write(&out.join(CLOUD_NAME), ply)?;
    println!("wrote {n} points");
    Ok(n)
}
