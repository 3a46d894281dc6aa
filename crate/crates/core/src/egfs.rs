//! Error-guided feature selection.
//!
//! Every `k` epochs the current model's reprojection errors are evaluated on
//! all training patches. Per frame, the lowest-τ% cells become prompts, a
//! [`RegionExpander`] grows them into coherent regions, and cells whose
//! confidence falls below the frame's median are dropped. Only masked cells
//! feed the next training buffer. The first iteration samples everywhere.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::geometry::{reprojection_error, SceneCoordinate};
use crate::regressor::{self, AdamState, EpochStats, RegressorParams, TrainConfig, TrainingBuffer};
use crate::synth::{Frame, RegionLabel};
use crate::{par, rng, stats};

/// Upper bound on training buffer entries.
pub const N_MAX: usize = 2_000_000;
pub const DEFAULT_APPEARANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum EgfsError {
    #[error("no mask file for frame {frame_id} at {path}")]
    MissingMask { frame_id: u32, path: PathBuf },
    #[error("bad mask file {path}: {reason}")]
    BadMask { path: PathBuf, reason: String },
    #[error(transparent)]
    Regressor(#[from] regressor::RegressorError),
}

/// Per-frame reprojection errors; `None` marks behind-camera predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub frame_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub errors: Vec<Option<f64>>,
}

impl ErrorMap {
    pub fn valid_errors(&self) -> Vec<f64> {
        self.errors.iter().flatten().copied().collect()
    }
}

/// Model outputs on every cell of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_id: u32,
    pub coords: Vec<SceneCoordinate>,
    pub confidence: Vec<f64>,
    pub errors: ErrorMap,
}

pub fn predict_frame(params: &RegressorParams, frame: &Frame) -> FramePrediction {
    let out = params.predict_batch(&frame.grid.features);
    let mut coords = Vec::with_capacity(out.len());
    let mut confidence = Vec::with_capacity(out.len());
    let mut errors = Vec::with_capacity(out.len());
    for (cell, (y, c)) in out.into_iter().enumerate() {
        let y = SceneCoordinate(y);
        errors.push(reprojection_error(&frame.grid.pixel(cell), &y, &frame.pose_gt, &frame.intrinsics));
        coords.push(y);
        confidence.push(c);
    }
    FramePrediction {
        frame_id: frame.frame_id,
        coords,
        confidence,
        errors: ErrorMap { frame_id: frame.frame_id, rows: frame.grid.rows, cols: frame.grid.cols, errors },
    }
}

/// Predictions for many frames; frames are processed in parallel.
pub fn predict_frames(params: &RegressorParams, frames: &[Frame]) -> Vec<FramePrediction> {
    par::map(frames, |f| predict_frame(params, f))
}

pub fn compute_error_maps(params: &RegressorParams, frames: &[Frame]) -> Vec<ErrorMap> {
    predict_frames(params, frames).into_iter().map(|p| p.errors).collect()
}

/// Cells with the lowest `tau_pct` percent of valid errors, ascending by
/// error with ties broken by cell index (row-major, so `(row, col)` order).
pub fn select_prompts(em: &ErrorMap, tau_pct: f64) -> Vec<usize> {
    let mut valid: Vec<(f64, usize)> =
        em.errors.iter().enumerate().filter_map(|(i, e)| e.map(|e| (e, i))).collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let n = ((tau_pct * valid.len() as f64) / 100.0 - 1e-9).ceil().max(0.0) as usize;
    valid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    valid.into_iter().take(n.min(em.errors.len())).map(|(_, i)| i).collect()
}

/// Grows point prompts into regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionExpander {
    /// Flood fill over 4-neighbours whose appearance stays within
    /// `appearance_tolerance` (L∞) of the running region mean.
    Grow { appearance_tolerance: f64 },
    /// Flood fill over 4-neighbours sharing the prompt's ground-truth label.
    Oracle,
    /// Connected components of `<dir>/<frame_id>.pbm` that contain a prompt.
    File { dir: PathBuf },
}

impl Default for RegionExpander {
    fn default() -> Self {
        RegionExpander::Grow { appearance_tolerance: DEFAULT_APPEARANCE_TOLERANCE }
    }
}

impl fmt::Display for RegionExpander {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionExpander::Grow { appearance_tolerance } => write!(f, "grow({appearance_tolerance})"),
            RegionExpander::Oracle => write!(f, "oracle"),
            RegionExpander::File { dir } => write!(f, "file({})", dir.display()),
        }
    }
}

impl std::str::FromStr for RegionExpander {
    type Err = String;

    /// `grow`, `grow:<tolerance>`, `oracle` or `file:<dir>`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grow" => Ok(RegionExpander::default()),
            "oracle" => Ok(RegionExpander::Oracle),
            _ => {
                if let Some(dir) = s.strip_prefix("file:") {
                    return Ok(RegionExpander::File { dir: PathBuf::from(dir) });
                }
                let tol = s
                    .strip_prefix("grow:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown expander '{s}' (grow, grow:<tol>, oracle, file:<dir>)"))?;
                if !(tol >= 0.0) {
                    return Err(format!("appearance tolerance must be non-negative, got {tol}"));
                }
                Ok(RegionExpander::Grow { appearance_tolerance: tol })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgfsMask {
    pub frame_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
    pub iteration: usize,
    pub expander: String,
}

impl EgfsMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

fn neighbors(rows: usize, cols: usize, cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / cols, cell % cols);
    let up = (r > 0).then(|| cell - cols);
    let down = (r + 1 < rows).then(|| cell + cols);
    let left = (c > 0).then(|| cell - 1);
    let right = (c + 1 < cols).then(|| cell + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Flood fill from `seed` over cells accepted by `accept`.
fn flood(rows: usize, cols: usize, seed: usize, accept: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut seen = vec![false; rows * cols];
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    let mut region = vec![seed];
    while let Some(cell) = queue.pop_front() {
        for nb in neighbors(rows, cols, cell) {
            if !seen[nb] && accept(nb) {
                seen[nb] = true;
                region.push(nb);
                queue.push_back(nb);
            }
        }
    }
    region
}

/// 4-connected components of `mask`, as lists of cells.
pub fn components(rows: usize, cols: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut done = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || done[start] {
            continue;
        }
        let mut region = flood(rows, cols, start, |c| mask[c]);
        for &c in &region {
            done[c] = true;
        }
        region.sort_unstable();
        out.push(region);
    }
    out
}

/// Region grown from `seed`: 4-neighbours join while their appearance is
/// within `tolerance` (L∞) of the mean of the cells accepted so far.
fn grow_region(frame: &Frame, seed: usize, tolerance: f64) -> Vec<usize> {
    let grid = &frame.grid;
    let mut seen = vec![false; grid.len()];
    let mut sum = grid.appearance(seed);
    let mut region = vec![seed];
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    while let Some(cell) = queue.pop_front() {
        for nb in grid.neighbors(cell) {
            if seen[nb] {
                continue;
            }
            let mean = sum / region.len() as f64;
            if (grid.appearance(nb) - mean).amax() < tolerance {
                seen[nb] = true;
                sum += grid.appearance(nb);
                region.push(nb);
                queue.push_back(nb);
            }
        }
    }
    region
}

pub fn expand(prompts: &[usize], frame: &Frame, expander: &RegionExpander, iteration: usize) -> Result<EgfsMask, EgfsError> {
    let grid = &frame.grid;
    let (rows, cols) = (grid.rows, grid.cols);
    let mut cells = vec![false; rows * cols];
    match expander {
        RegionExpander::Grow { appearance_tolerance } => {
            for &p in prompts {
                if cells[p] {
                    continue;
                }
                for c in grow_region(frame, p, *appearance_tolerance) {
                    cells[c] = true;
                }
            }
        }
        RegionExpander::Oracle => {
            for &p in prompts {
                if cells[p] {
                    continue;
                }
                let label = grid.labels[p];
                for c in flood(rows, cols, p, |c| grid.labels[c] == label) {
                    cells[c] = true;
                }
            }
        }
        RegionExpander::File { dir } => {
            let path = dir.join(format!("{}.pbm", frame.frame_id));
            if !path.exists() {
                return Err(EgfsError::MissingMask { frame_id: frame.frame_id, path });
            }
            let (r, c, loaded) = read_pbm(&path)?;
            if (r, c) != (rows, cols) {
                return Err(EgfsError::BadMask { path, reason: format!("mask is {r}x{c}, grid is {rows}x{cols}") });
            }
            let mut is_prompt = vec![false; rows * cols];
            for &p in prompts {
                is_prompt[p] = true;
            }
            for comp in components(rows, cols, &loaded) {
                if comp.iter().any(|&c| is_prompt[c]) {
                    for c in comp {
                        cells[c] = true;
                    }
                }
            }
        }
    }
    Ok(EgfsMask { frame_id: frame.frame_id, rows, cols, cells, iteration, expander: expander.to_string() })
}

/// Drops masked cells whose confidence is below the frame's median confidence
/// over valid cells. Returns the refined mask and whether it fell back to the
/// input because nothing survived.
pub fn refine_with_confidence(mask: &EgfsMask, confidence: &[f64], valid: &[bool]) -> (EgfsMask, bool) {
    assert_eq!(mask.cells.len(), confidence.len(), "confidence grid shape mismatch");
    let valid_conf: Vec<f64> = confidence.iter().zip(valid).filter(|(_, v)| **v).map(|(c, _)| *c).collect();
    let Some(sigma) = stats::lower_median(&valid_conf) else {
        return (mask.clone(), true);
    };
    let mut out = mask.clone();
    for (m, c) in out.cells.iter_mut().zip(confidence) {
        *m = *m && *c >= sigma;
    }
    if out.count() == 0 && mask.count() > 0 {
        log::warn!("frame {}: confidence refinement emptied the mask; keeping the unrefined mask", mask.frame_id);
        return (mask.clone(), true);
    }
    (out, false)
}

/// Sampler used to fill the training buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every patch, every iteration.
    Random,
    /// Error-guided masks from the second iteration on.
    Egfs,
    /// Cells with error below the dataset-wide `q`-quantile.
    Quantile { q: f64 },
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::Random => write!(f, "random"),
            SamplingMode::Egfs => write!(f, "egfs"),
            SamplingMode::Quantile { q } => write!(f, "quantile:{q}"),
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    /// `random`, `egfs` or `quantile:<q>` with `q` in (0, 1).
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(SamplingMode::Random),
            "egfs" => Ok(SamplingMode::Egfs),
            _ => {
                let q = s
                    .strip_prefix("quantile:")
                    .and_then(|q| q.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown sampling mode '{s}' (random, egfs, quantile:<q>)"))?;
                if !(q > 0.0 && q < 1.0) {
                    return Err(format!("quantile must be in (0, 1), got {q}"));
                }
                Ok(SamplingMode::Quantile { q })
            }
        }
    }
}

/// Per-frame selection for the quantile baseline: `r < Q_q` over all frames.
pub fn quantile_selection(maps: &[ErrorMap], q: f64) -> Vec<Vec<bool>> {
    let all: Vec<f64> = maps.iter().flat_map(ErrorMap::valid_errors).collect();
    let Some(threshold) = stats::quantile(&all, q) else {
        return maps.iter().map(|m| vec![false; m.errors.len()]).collect();
    };
    maps.iter().map(|m| m.errors.iter().map(|e| e.is_some_and(|e| e < threshold)).collect()).collect()
}

/// Builds a training buffer from per-frame selections (`None` selects every
/// patch).
///
/// The buffer always holds `min(total patches, N_MAX)` entries: a larger
/// selection is subsampled uniformly, a smaller one is repeated in fresh
/// shuffles until the buffer is full. Entries are shuffled with the `buffer`
/// stream of `seed`. An all-empty selection falls back to every patch.
pub fn build_buffer(frames: &[Frame], selection: Option<&[Vec<bool>]>, seed: u64, iteration: u64) -> TrainingBuffer {
    assert!(!frames.is_empty(), "build_buffer needs frames");
    let dim = crate::synth::FEATURE_DIM;
    let mut all = TrainingBuffer::new(dim);
    all.cameras = frames.iter().map(|f| (f.pose_gt, f.intrinsics)).collect();
    let mut selected = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for cell in 0..f.grid.len() {
            let keep = selection.is_none_or(|s| s[fi][cell]);
            let idx = all.len();
            all.push(f.grid.feature(cell), f.grid.pixels[cell], f.frame_id, cell as u32, fi as u32);
            if keep {
                selected.push(idx);
            }
        }
    }
    if selected.is_empty() {
        log::warn!("iteration {iteration}: masks selected no patches; sampling from every patch");
        selected = (0..all.len()).collect();
    }
    let target = all.len().min(N_MAX);
    let mut rng = rng::stream(seed, rng::BUFFER, iteration);
    let mut order = Vec::with_capacity(target);
    while order.len() < target {
        let mut pass = selected.clone();
        pass.shuffle(&mut rng);
        let need = target - order.len();
        order.extend(pass.into_iter().take(need));
    }
    order.shuffle(&mut rng);
    all.select(&order)
}

/// Share of masked cells per label, and the share of each label's cells that
/// are masked, over a set of masks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MaskAudit {
    pub total: usize,
    pub masked: usize,
    pub masked_dynamic: usize,
    pub total_dynamic: usize,
    pub masked_textureless: usize,
    pub total_textureless: usize,
}

impl MaskAudit {
    /// Fraction of all Dynamic patches that lie inside the masks.
    pub fn dynamic_fraction(&self) -> f64 {
        self.masked_dynamic as f64 / self.total_dynamic.max(1) as f64
    }

    /// Fraction of masked cells that are Dynamic.
    pub fn dynamic_share(&self) -> f64 {
        self.masked_dynamic as f64 / self.masked.max(1) as f64
    }

    pub fn textureless_fraction(&self) -> f64 {
        self.masked_textureless as f64 / self.total_textureless.max(1) as f64
    }

    pub fn static_fraction(&self) -> f64 {
        let total = self.total - self.total_dynamic - self.total_textureless;
        (self.masked - self.masked_dynamic - self.masked_textureless) as f64 / total.max(1) as f64
    }
}

pub fn audit_masks(frames: &[Frame], selection: &[Vec<bool>]) -> MaskAudit {
    let mut a = MaskAudit::default();
    for (f, sel) in frames.iter().zip(selection) {
        for (l, &m) in f.grid.labels.iter().zip(sel) {
            a.total += 1;
            a.masked += usize::from(m);
            match l {
                RegionLabel::Dynamic => {
                    a.total_dynamic += 1;
                    a.masked_dynamic += usize::from(m);
                }
                RegionLabel::TextureLess => {
                    a.total_textureless += 1;
                    a.masked_textureless += usize::from(m);
                }
                RegionLabel::StaticTextured => {}
            }
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationArtifacts {
    /// 1-based.
    pub iteration: usize,
    pub error_maps: Vec<ErrorMap>,
    pub prompts: Vec<Vec<usize>>,
    /// Final (refined) masks for EGFS mode.
    pub masks: Vec<EgfsMask>,
    /// Cells that fed the buffer this iteration, per frame.
    pub selection: Option<Vec<Vec<bool>>>,
    pub audit: Option<MaskAudit>,
    pub refine_fallbacks: usize,
    pub buffer_len: usize,
    /// `(global epoch, stats)`.
    pub epochs: Vec<(usize, EpochStats)>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub params: RegressorParams,
    pub iterations: Vec<IterationArtifacts>,
}

impl TrainingOutput {
    pub fn final_masks(&self) -> Option<&[EgfsMask]> {
        self.iterations.iter().rev().find(|it| !it.masks.is_empty()).map(|it| it.masks.as_slice())
    }

    pub fn loss_rows(&self) -> Vec<(usize, usize, EpochStats)> {
        self.iterations.iter().flat_map(|it| it.epochs.iter().map(move |(e, s)| (*e, it.iteration, *s))).collect()
    }
}

/// Per-frame prompts, per-frame masks and the number of refinement fallbacks.
pub type MaskBatch = (Vec<Vec<usize>>, Vec<EgfsMask>, usize);

/// Computes masks for one iteration: prompts, expansion and (optionally)
/// confidence refinement, per frame in parallel.
pub fn generate_masks(
    preds: &[FramePrediction],
    frames: &[Frame],
    tau_pct: f64,
    expander: &RegionExpander,
    refine: bool,
    iteration: usize,
) -> Result<MaskBatch, EgfsError> {
    let idx: Vec<usize> = (0..frames.len()).collect();
    let per_frame = par::map(&idx, |&i| -> Result<(Vec<usize>, EgfsMask, bool), EgfsError> {
        let pred = &preds[i];
        let prompts = select_prompts(&pred.errors, tau_pct);
        let mask = expand(&prompts, &frames[i], expander, iteration)?;
        if !refine {
            return Ok((prompts, mask, false));
        }
        let valid: Vec<bool> = pred.errors.errors.iter().map(Option::is_some).collect();
        let (refined, fell_back) = refine_with_confidence(&mask, &pred.confidence, &valid);
        Ok((prompts, refined, fell_back))
    });
    let mut prompts = Vec::with_capacity(frames.len());
    let mut masks = Vec::with_capacity(frames.len());
    let mut fallbacks = 0;
    for r in per_frame {
        let (p, m, f) = r?;
        prompts.push(p);
        masks.push(m);
        fallbacks += usize::from(f);
    }
    Ok((prompts, masks, fallbacks))
}

/// Iterative training: `epochs_total / epochs_per_iteration` iterations, the
/// first on every patch, later ones on the configured sampler's selection.
pub fn run_training(
    frames: &[Frame],
    scene_center: nalgebra::Vector3<f64>,
    scene_radius: f64,
    cfg: &TrainConfig,
    expander: &RegionExpander,
    mode: SamplingMode,
) -> Result<TrainingOutput, EgfsError> {
    cfg.validate()?;
    assert!(!frames.is_empty(), "run_training needs frames");
    let mut params = RegressorParams::init(cfg.architecture, scene_center, scene_radius, cfg.seed);
    params.confidence_trained = cfg.use_confidence;
    let mut opt = AdamState::new(params.values.len());
    let k = cfg.epochs_per_iteration;
    let total = cfg.epochs_total as f64;
    let mut iterations = Vec::new();
    for it in 0..cfg.iterations() {
        let mut art = IterationArtifacts {
            iteration: it + 1,
            error_maps: Vec::new(),
            prompts: Vec::new(),
            masks: Vec::new(),
            selection: None,
            audit: None,
            refine_fallbacks: 0,
            buffer_len: 0,
            epochs: Vec::new(),
        };
        if it > 0 && mode != SamplingMode::Random {
            let preds = predict_frames(&params, frames);
            let selection = match mode {
                SamplingMode::Egfs => {
                    let (prompts, masks, fallbacks) =
                        generate_masks(&preds, frames, cfg.tau_prompt_pct, expander, cfg.use_confidence, it + 1)?;
                    art.prompts = prompts;
                    art.refine_fallbacks = fallbacks;
                    let sel: Vec<Vec<bool>> = masks.iter().map(|m| m.cells.clone()).collect();
                    art.masks = masks;
                    sel
                }
                SamplingMode::Quantile { q } => {
                    let maps: Vec<ErrorMap> = preds.iter().map(|p| p.errors.clone()).collect();
                    quantile_selection(&maps, q)
                }
                SamplingMode::Random => unreachable!(),
            };
            art.audit = Some(audit_masks(frames, &selection));
            art.error_maps = preds.into_iter().map(|p| p.errors).collect();
            art.selection = Some(selection);
        }
        let buffer = build_buffer(frames, art.selection.as_deref(), cfg.seed, it as u64);
        art.buffer_len = buffer.len();
        for e in 0..k {
            let epoch = it * k + e;
            let t_range = (epoch as f64 / total, (epoch + 1) as f64 / total);
            let stats = regressor::train_epoch(&mut params, &buffer, t_range, cfg, &mut opt, epoch as u64);
            log::debug!("iteration {} epoch {} loss {:.4} valid {:.3}", it + 1, epoch + 1, stats.mean_loss, stats.valid_fraction);
            art.epochs.push((epoch + 1, stats));
        }
        iterations.push(art);
    }
    params.confidence_trained = cfg.use_confidence;
    Ok(TrainingOutput { params, iterations })
}

// ---------------------------------------------------------------------------
// Mask and prompt files

/// Plain (P1) portable bitmap, `1` = selected.
pub fn encode_pbm(rows: usize, cols: usize, cells: &[bool]) -> String {
    let mut s = format!("P1\n{cols} {rows}\n");
    for r in 0..rows {
        let line: Vec<&str> = (0..cols).map(|c| if cells[r * cols + c] { "1" } else { "0" }).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pbm(path: &Path, mask: &EgfsMask) -> io::Result<()> {
    crate::synth::write_atomic(path, encode_pbm(mask.rows, mask.cols, &mask.cells).as_bytes())
}

/// Reads a P1 bitmap, returning `(rows, cols, cells)`.
pub fn read_pbm(path: &Path) -> Result<(usize, usize, Vec<bool>), EgfsError> {
    let bad = |reason: &str| EgfsError::BadMask { path: path.to_path_buf(), reason: reason.to_string() };
    let text = std::fs::read_to_string(path).map_err(|e| bad(&e.to_string()))?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P1") {
        return Err(bad("expected P1 header"));
    }
    let cols: usize = tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("missing width"))?;
    let rows: usize = tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("missing height"))?;
    let mut cells = Vec::with_capacity(rows * cols);
    for t in tokens {
        // P1 allows pixels without separating whitespace.
        for ch in t.chars() {
            match ch {
                '0' => cells.push(false),
                '1' => cells.push(true),
                _ => return Err(bad("unexpected pixel value")),
            }
        }
    }
    if cells.len() != rows * cols {
        return Err(bad("pixel count does not match header"));
    }
    Ok((rows, cols, cells))
}

/// `frame_id,row,col,error_px` rows for every prompt.
pub fn write_prompts_csv(out: &mut impl Write, maps: &[ErrorMap], prompts: &[Vec<usize>]) -> io::Result<()> {
    writeln!(out, "frame_id,row,col,error_px")?;
    for (m, ps) in maps.iter().zip(prompts) {
        for &p in ps {
            let e = m.errors[p].unwrap_or(f64::NAN);
            writeln!(out, "{},{},{},{:.6}", m.frame_id, p / m.cols, p % m.cols, e)?;
        }
    }
    Ok(())
}
