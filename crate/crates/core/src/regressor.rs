//! Per-patch scene coordinate regressor with a confidence head.
//!
//! The network is a ReLU trunk shared by a linear coordinate head (offsets
//! from the scene center, meters) and a two-layer confidence head producing a
//! logit. All parameters live in one flat `Vec<f64>`; layers are views into it.
//!
//! Training minimises, per sample,
//!
//! ```text
//! valid:   c · w·tanh(r / w) − α log c
//! invalid: ‖y − ȳ‖          − α log(1 − c)
//! ```
//!
//! where `r` is the reprojection error under the ground-truth pose, `w` the
//! clamp width at the current training progress and `ȳ` the dummy coordinate
//! at 10 m depth. With confidence disabled `c` is frozen at 1 and the
//! log terms vanish.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{dummy_coordinate, CameraIntrinsics, PixelPoint, Pose, SceneCoordinate, MIN_DEPTH};
use crate::{par, rng};

/// Added inside both log terms.
pub const LOG_EPS: f64 = 1e-12;
pub const MAX_DEPTH: f64 = 1000.0;
pub const MAX_REPROJECTION: f64 = 1000.0;
/// Predictions farther than this many scene radii from the center are invalid.
pub const RADIUS_FACTOR: f64 = 10.0;
/// Samples per gradient chunk. Fixed so the reduction order never depends on
/// the number of threads.
const CHUNK: usize = 64;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EGFSW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RegressorError {
    #[error("non-finite feature value")]
    NonFiniteFeature,
    #[error("feature has {got} components, expected {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_dim: usize,
    pub width: usize,
    /// Number of trunk layers.
    pub depth: usize,
    pub conf_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input_dim: crate::synth::FEATURE_DIM, width: 128, depth: 4, conf_hidden: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.inputs * self.outputs;
        w..w + self.outputs
    }

    fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }
}

impl Architecture {
    /// Trunk layers, then the coordinate head, then the two confidence layers.
    fn layers(&self) -> Vec<LayerShape> {
        let mut dims = vec![(self.input_dim, self.width)];
        dims.extend((1..self.depth).map(|_| (self.width, self.width)));
        dims.push((self.width, 3));
        dims.push((self.width, self.conf_hidden));
        dims.push((self.conf_hidden, 1));
        let mut offset = 0;
        dims.into_iter()
            .map(|(inputs, outputs)| {
                let l = LayerShape { inputs, outputs, offset };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau_prompt_pct: f64,
    pub epochs_total: usize,
    pub epochs_per_iteration: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clamp_w_max: f64,
    pub clamp_w_min: f64,
    pub seed: u64,
    /// Train the confidence head with the joint loss; otherwise `c ≡ 1`.
    pub use_confidence: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            tau_prompt_pct: 10.0,
            epochs_total: 20,
            epochs_per_iteration: 5,
            learning_rate: 1e-3,
            batch_size: 512,
            clamp_w_max: 50.0,
            clamp_w_min: 1.0,
            seed: 0,
            use_confidence: true,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        let err = |m: &str| Err(RegressorError::Config(m.to_string()));
        if self.epochs_per_iteration == 0 || self.epochs_total == 0 || !self.epochs_total.is_multiple_of(self.epochs_per_iteration) {
            return err("epochs_total must be a positive multiple of epochs_per_iteration");
        }
        if !(self.alpha > 0.0) {
            return err("alpha must be positive");
        }
        if !(self.tau_prompt_pct > 0.0 && self.tau_prompt_pct <= 100.0) {
            return err("tau_prompt_pct must lie in (0, 100]");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return err("learning_rate and batch_size must be positive");
        }
        if !(self.clamp_w_min > 0.0 && self.clamp_w_max >= self.clamp_w_min) {
            return err("clamp bounds must satisfy 0 < w_min <= w_max");
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.epochs_total / self.epochs_per_iteration
    }
}

/// Clamp width at training progress `t ∈ [0, 1]`, decaying linearly.
pub fn clamp_schedule(t: f64, cfg: &TrainConfig) -> f64 {
    let t = t.clamp(0.0, 1.0);
    cfg.clamp_w_max * (1.0 - t) + cfg.clamp_w_min * t
}

/// Soft clamp `w·tanh(r/w)`.
#[inline]
pub fn clamp_error(r: f64, w: f64) -> f64 {
    w * (r / w).tanh()
}

/// Valid-branch loss as a function of confidence for a fixed clamped error.
#[inline]
pub fn valid_branch_loss(c: f64, r_hat: f64, alpha: f64) -> f64 {
    c * r_hat - alpha * (c + LOG_EPS).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub architecture: Architecture,
    pub scene_center: Vector3<f64>,
    pub scene_radius: f64,
    /// Whether the confidence head was trained; consumers fall back to
    /// unfiltered behaviour when it was not.
    pub confidence_trained: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub y: SceneCoordinate,
    pub c: f64,
    pub valid: bool,
}

/// Camera context of a patch, needed to decide validity.
#[derive(Debug, Clone, Copy)]
pub struct SampleCamera<'a> {
    pub pixel: PixelPoint,
    pub pose: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
}

struct ForwardCache {
    /// Trunk activations, including the input at index 0.
    acts: Vec<Array2<f64>>,
    conf_hidden: Array2<f64>,
    coords: Array2<f64>,
    logits: Array1<f64>,
}

impl RegressorParams {
    /// All-zero parameters: `y = scene_center` and `c = 0.5` everywhere.
    pub fn zeros(architecture: Architecture, scene_center: Vector3<f64>, scene_radius: f64) -> Self {
        Self { architecture, scene_center, scene_radius, confidence_trained: true, values: vec![0.0; architecture.param_count()] }
    }

    /// He-initialised trunk and confidence hidden layer, small coordinate head,
    /// zero confidence output layer.
    pub fn init(architecture: Architecture, scene_center: Vector3<f64>, scene_radius: f64, seed: u64) -> Self {
        let mut p = Self::zeros(architecture, scene_center, scene_radius);
        let mut rng = rng::stream(seed, rng::TRAIN, u64::MAX);
        let layers = architecture.layers();
        let n = layers.len();
        for (i, l) in layers.iter().enumerate() {
            let std = if i == n - 1 {
                0.0
            } else if i == n - 3 {
                0.1 / (l.inputs as f64).sqrt()
            } else {
                (2.0 / l.inputs as f64).sqrt()
            };
            if std > 0.0 {
                let normal = Normal::new(0.0, std).unwrap();
                for v in &mut p.values[l.weights()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        p
    }

    fn layer(&self, l: &LayerShape) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((l.inputs, l.outputs), &self.values[l.weights()]).unwrap();
        let b = ArrayView1::from(&self.values[l.bias()]);
        (w, b)
    }

    fn forward_cache(&self, x: Array2<f64>) -> ForwardCache {
        let layers = self.architecture.layers();
        let depth = self.architecture.depth;
        let mut acts = Vec::with_capacity(depth + 1);
        acts.push(x);
        for l in &layers[..depth] {
            let (w, b) = self.layer(l);
            let mut z = acts.last().unwrap().dot(&w);
            z += &b;
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        let top = acts.last().unwrap();
        let (wc, bc) = self.layer(&layers[depth]);
        let mut coords = top.dot(&wc);
        coords += &bc;
        let (w1, b1) = self.layer(&layers[depth + 1]);
        let mut conf_hidden = top.dot(&w1);
        conf_hidden += &b1;
        conf_hidden.mapv_inplace(|v| v.max(0.0));
        let (w2, b2) = self.layer(&layers[depth + 2]);
        let mut logits = conf_hidden.dot(&w2);
        logits += &b2;
        let logits = logits.index_axis_move(Axis(1), 0);
        ForwardCache { acts, conf_hidden, coords, logits }
    }

    /// Accumulates parameter gradients into `grad` given `dL/dcoords` and `dL/dlogit`.
    fn backward(&self, cache: &ForwardCache, d_coords: &Array2<f64>, d_logits: Option<&Array1<f64>>, grad: &mut [f64]) {
        let layers = self.architecture.layers();
        let depth = self.architecture.depth;
        let top = &cache.acts[depth];

        let add = |grad: &mut [f64], l: &LayerShape, a_prev: &ArrayView2<f64>, dz: &Array2<f64>| {
            let gw = a_prev.t().dot(dz);
            for (g, v) in grad[l.weights()].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in grad[l.bias()].iter_mut().zip(dz.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
        };

        let (wc, _) = self.layer(&layers[depth]);
        add(grad, &layers[depth], &top.view(), d_coords);
        let mut d_top = d_coords.dot(&wc.t());

        if let Some(dl) = d_logits {
            let dl2 = dl.view().insert_axis(Axis(1)).to_owned();
            let (w2, _) = self.layer(&layers[depth + 2]);
            add(grad, &layers[depth + 2], &cache.conf_hidden.view(), &dl2);
            let mut dh = dl2.dot(&w2.t());
            dh.zip_mut_with(&cache.conf_hidden, |d, &h| {
                if h <= 0.0 {
                    *d = 0.0
                }
            });
            let (w1, _) = self.layer(&layers[depth + 1]);
            add(grad, &layers[depth + 1], &top.view(), &dh);
            d_top += &dh.dot(&w1.t());
        }

        for i in (0..depth).rev() {
            d_top.zip_mut_with(&cache.acts[i + 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            add(grad, &layers[i], &cache.acts[i].view(), &d_top);
            if i > 0 {
                let (w, _) = self.layer(&layers[i]);
                d_top = d_top.dot(&w.t());
            }
        }
    }

    /// Batched inference: `(y, c)` per row of `features` (row-major, `input_dim` wide).
    pub fn predict_batch(&self, features: &[f32]) -> Vec<(Vector3<f64>, f64)> {
        let dim = self.architecture.input_dim;
        let n = features.len() / dim;
        let chunks: Vec<usize> = (0..n.div_ceil(256)).collect();
        par::map(&chunks, |&ci| {
            let lo = ci * 256;
            let hi = (lo + 256).min(n);
            let x = Array2::from_shape_fn((hi - lo, dim), |(r, c)| f64::from(features[(lo + r) * dim + c]));
            let cache = self.forward_cache(x);
            (0..hi - lo)
                .map(|r| {
                    let o = cache.coords.row(r);
                    (self.scene_center + Vector3::new(o[0], o[1], o[2]), sigmoid(cache.logits[r]))
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn is_valid_prediction(&self, y: &Vector3<f64>, cam: &SampleCamera) -> bool {
        validity(self, y, cam).is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Predicts coordinate, confidence and validity for one patch.
pub fn forward(params: &RegressorParams, feature: &[f64], cam: &SampleCamera) -> Result<Prediction, RegressorError> {
    if feature.len() != params.architecture.input_dim {
        return Err(RegressorError::FeatureDim { got: feature.len(), expected: params.architecture.input_dim });
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(RegressorError::NonFiniteFeature);
    }
    let x = Array2::from_shape_vec((1, feature.len()), feature.to_vec()).unwrap();
    let cache = params.forward_cache(x);
    let o = cache.coords.row(0);
    let y = params.scene_center + Vector3::new(o[0], o[1], o[2]);
    let c = sigmoid(cache.logits[0]);
    Ok(Prediction { y: SceneCoordinate(y), c, valid: params.is_valid_prediction(&y, cam) })
}

/// Camera-frame point and residual vector when `y` is in the validity set.
fn validity(params: &RegressorParams, y: &Vector3<f64>, cam: &SampleCamera) -> Option<(Vector3<f64>, Vector2<f64>)> {
    if (y - params.scene_center).norm() >= params.scene_radius * RADIUS_FACTOR {
        return None;
    }
    let pc = cam.pose.inverse_transform(y);
    if !(pc.z >= MIN_DEPTH && pc.z <= MAX_DEPTH) {
        return None;
    }
    let e = cam.intrinsics.project_camera(&pc) - cam.pixel.0;
    (e.norm() < MAX_REPROJECTION).then_some((pc, e))
}

/// Training samples. Entry `i` is the cell `cells[i]` of frame `frame_ids[i]`.
#[derive(Debug, Clone, Default)]
pub struct TrainingBuffer {
    pub dim: usize,
    pub features: Vec<f32>,
    pub pixels: Vec<[f32; 2]>,
    pub frame_ids: Vec<u32>,
    pub cells: Vec<u32>,
    /// Index into `cameras` per entry.
    pub camera: Vec<u32>,
    pub cameras: Vec<(Pose, CameraIntrinsics)>,
}

impl TrainingBuffer {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, feature: &[f32], pixel: [f32; 2], frame_id: u32, cell: u32, camera: u32) {
        self.features.extend_from_slice(feature);
        self.pixels.push(pixel);
        self.frame_ids.push(frame_id);
        self.cells.push(cell);
        self.camera.push(camera);
    }

    /// Keeps entries in the given order (indices may repeat).
    pub fn select(&self, order: &[usize]) -> TrainingBuffer {
        let mut out = TrainingBuffer { dim: self.dim, cameras: self.cameras.clone(), ..Default::default() };
        for &i in order {
            out.push(self.feature(i), self.pixels[i], self.frame_ids[i], self.cells[i], self.camera[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean per-sample loss.
    pub loss: f64,
    /// Gradient of `loss`, same layout as `RegressorParams::values`.
    pub grad: Vec<f64>,
    pub valid_count: usize,
}

struct ChunkOut {
    loss: f64,
    grad: Vec<f64>,
    valid: usize,
}

fn chunk_loss(params: &RegressorParams, buffer: &TrainingBuffer, idx: &[usize], w: f64, cfg: &TrainConfig, scale: f64) -> ChunkOut {
    let dim = buffer.dim;
    let n = idx.len();
    let x = Array2::from_shape_fn((n, dim), |(r, c)| f64::from(buffer.features[idx[r] * dim + c]));
    let cache = params.forward_cache(x);
    let mut d_coords = Array2::<f64>::zeros((n, 3));
    let mut d_logits = Array1::<f64>::zeros(n);
    let mut loss = 0.0;
    let mut valid = 0;
    for (r, &i) in idx.iter().enumerate() {
        let o = cache.coords.row(r);
        let y = params.scene_center + Vector3::new(o[0], o[1], o[2]);
        let (pose, k) = &buffer.cameras[buffer.camera[i] as usize];
        let px = buffer.pixels[i];
        let pixel = PixelPoint::new(f64::from(px[0]), f64::from(px[1]));
        let cam = SampleCamera { pixel, pose, intrinsics: k };
        let c = sigmoid(cache.logits[r]);
        let (sample_loss, dy, dc) = match validity(params, &y, &cam) {
            Some((pc, e)) => {
                valid += 1;
                let r_err = e.norm();
                let th = (r_err / w).tanh();
                let r_hat = w * th;
                let (l, dr_hat, dc) = if cfg.use_confidence {
                    (valid_branch_loss(c, r_hat, cfg.alpha), c, r_hat - cfg.alpha / (c + LOG_EPS))
                } else {
                    (r_hat, 1.0, 0.0)
                };
                let dr = dr_hat * (1.0 - th * th);
                let dy = if r_err > 1e-12 {
                    let de = e * (dr / r_err);
                    let iz = 1.0 / pc.z;
                    let dpc = Vector3::new(
                        k.fx * iz * de.x,
                        k.fy * iz * de.y,
                        -(k.fx * pc.x * de.x + k.fy * pc.y * de.y) * iz * iz,
                    );
                    pose.rotation * dpc
                } else {
                    Vector3::zeros()
                };
                (l, dy, dc)
            }
            None => {
                let target = dummy_coordinate(&pixel, pose, k).0;
                let d = y - target;
                let dist = d.norm();
                let dy = if dist > 1e-12 { d / dist } else { Vector3::zeros() };
                if cfg.use_confidence {
                    (dist - cfg.alpha * (1.0 - c + LOG_EPS).ln(), dy, cfg.alpha / (1.0 - c + LOG_EPS))
                } else {
                    (dist, dy, 0.0)
                }
            }
        };
        loss += sample_loss;
        for j in 0..3 {
            d_coords[(r, j)] = dy[j] * scale;
        }
        d_logits[r] = dc * c * (1.0 - c) * scale;
    }
    let mut grad = vec![0.0; params.values.len()];
    params.backward(&cache, &d_coords, cfg.use_confidence.then_some(&d_logits), &mut grad);
    ChunkOut { loss, grad, valid }
}

/// Mean joint loss over `batch` (indices into `buffer`) and its exact gradient.
///
/// Chunks of the batch are evaluated in parallel and reduced in index order,
/// so the result does not depend on the thread count.
pub fn loss_and_grad(
    params: &RegressorParams,
    buffer: &TrainingBuffer,
    batch: &[usize],
    t: f64,
    cfg: &TrainConfig,
) -> LossOutput {
    assert!(!batch.is_empty(), "loss_and_grad needs a non-empty batch");
    let w = clamp_schedule(t, cfg);
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
    let outs = par::map(&chunks, |idx| chunk_loss(params, buffer, idx, w, cfg, scale));
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0.0;
    let mut valid_count = 0;
    for o in outs {
        loss += o.loss;
        valid_count += o.valid;
        for (g, v) in grad.iter_mut().zip(&o.grad) {
            *g += v;
        }
    }
    LossOutput { loss: loss * scale, grad, valid_count }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, values: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in values.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub valid_fraction: f64,
}

/// One shuffled pass over `buffer` with Adam updates. Progress runs linearly
/// from `t_range.0` to `t_range.1` across the epoch's batches.
pub fn train_epoch(
    params: &mut RegressorParams,
    buffer: &TrainingBuffer,
    t_range: (f64, f64),
    cfg: &TrainConfig,
    opt: &mut AdamState,
    epoch: u64,
) -> EpochStats {
    assert!(!buffer.is_empty(), "train_epoch needs a non-empty buffer");
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut rng = rng::stream(cfg.seed, rng::TRAIN, epoch);
    order.shuffle(&mut rng);
    let n_batches = order.len().div_ceil(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut valid = 0usize;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let t = t_range.0 + (t_range.1 - t_range.0) * (b as f64 / n_batches as f64);
        let out = loss_and_grad(params, buffer, batch, t, cfg);
        loss_sum += out.loss * batch.len() as f64;
        valid += out.valid_count;
        opt.update(&mut params.values, &out.grad, cfg.learning_rate);
    }
    if cfg.use_confidence {
        params.confidence_trained = true;
    }
    EpochStats { mean_loss: loss_sum / order.len() as f64, valid_fraction: valid as f64 / order.len() as f64 }
}

/// Draws a random order of `n` entries for callers that need one outside an epoch.
pub fn shuffled(n: usize, seed: u64, stream: &str, index: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng::stream(seed, stream, index));
    v
}

// ---------------------------------------------------------------------------
// Checkpoints

fn ck_err(path: &Path, reason: impl Into<String>) -> RegressorError {
    RegressorError::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn encode_checkpoint(params: &RegressorParams) -> Vec<u8> {
    let layers = params.architecture.layers();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::from(params.confidence_trained).to_le_bytes());
    for v in params.scene_center.iter().chain(std::iter::once(&params.scene_radius)) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let a = params.architecture;
    for v in [a.input_dim, a.width, a.depth, a.conf_hidden, layers.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in &layers {
        buf.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        buf.extend_from_slice(&(l.outputs as u32).to_le_bytes());
    }
    for v in &params.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<RegressorParams, RegressorError> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8], RegressorError> {
        if r.len() < n {
            return Err(ck_err(path, "truncated"));
        }
        let (a, b) = r.split_at(n);
        r = b;
        Ok(a)
    };
    if take(5)? != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "bad magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let confidence_trained = u32_of(take(4)?) != 0;
    let mut meta = [0.0f64; 4];
    for m in &mut meta {
        *m = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32_of(take(4)?) as usize;
    }
    let architecture = Architecture { input_dim: dims[0], width: dims[1], depth: dims[2], conf_hidden: dims[3] };
    if architecture.depth == 0 || architecture.depth > 64 || architecture.width > 1 << 16 {
        return Err(ck_err(path, "implausible architecture"));
    }
    let layers = architecture.layers();
    if dims[4] != layers.len() {
        return Err(ck_err(path, "layer count mismatch"));
    }
    for l in &layers {
        let (i, o) = (u32_of(take(4)?) as usize, u32_of(take(4)?) as usize);
        if (i, o) != (l.inputs, l.outputs) {
            return Err(ck_err(path, "layer shape mismatch"));
        }
    }
    let n = architecture.param_count();
    let raw = take(4 * n)?;
    if !r.is_empty() {
        return Err(ck_err(path, "trailing bytes"));
    }
    let values = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect();
    Ok(RegressorParams {
        architecture,
        scene_center: Vector3::new(meta[0], meta[1], meta[2]),
        scene_radius: meta[3],
        confidence_trained,
        values,
    })
}

pub fn save_checkpoint(path: &Path, params: &RegressorParams) -> Result<(), RegressorError> {
    crate::synth::write_atomic(path, &encode_checkpoint(params))
        .map_err(|source| RegressorError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<RegressorParams, RegressorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| RegressorError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes, path)
}

/// Rounds every parameter through `f32`, matching a save/load cycle.
pub fn quantize(params: &RegressorParams) -> RegressorParams {
    let mut p = params.clone();
    for v in &mut p.values {
        *v = f64::from(*v as f32);
    }
    p
}

/// Appends `epoch,iteration,mean_loss,valid_fraction` rows to a CSV writer.
pub fn write_loss_rows(out: &mut impl Write, rows: &[(usize, usize, EpochStats)], header: bool) -> io::Result<()> {
    if header {
        writeln!(out, "epoch,iteration,mean_loss,valid_fraction")?;
    }
    for (epoch, iteration, s) in rows {
        writeln!(out, "{epoch},{iteration},{:.9},{:.6}", s.mean_loss, s.valid_fraction)?;
    }
    Ok(())
}

/// Layer views for test oracles: `(weights in×out row-major, bias)` per layer in
/// trunk, coordinate, confidence-hidden, confidence-output order.
pub fn layer_slices(params: &RegressorParams) -> Vec<(usize, usize, &[f64], &[f64])> {
    params
        .architecture
        .layers()
        .iter()
        .map(|l| (l.inputs, l.outputs, &params.values[l.weights()], &params.values[l.bias()]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture { input_dim: 4, width: 8, depth: 2, conf_hidden: 5 }
    }

    #[test]
    fn zero_params_predict_center_and_half() {
        let center = Vector3::new(1.0, 2.0, 3.0);
        let p = RegressorParams::zeros(tiny(), center, 5.0);
        let pose = Pose::identity();
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100);
        let cam = SampleCamera { pixel: PixelPoint::new(10.0, 10.0), pose: &pose, intrinsics: &k };
        let pred = forward(&p, &[0.3, -1.0, 2.0, 0.0], &cam).unwrap();
        assert_eq!(pred.y.0, center);
        assert_eq!(pred.c, 0.5);
    }

    #[test]
    fn rejects_non_finite_features() {
        let p = RegressorParams::zeros(tiny(), Vector3::zeros(), 1.0);
        let pose = Pose::identity();
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100);
        let cam = SampleCamera { pixel: PixelPoint::new(10.0, 10.0), pose: &pose, intrinsics: &k };
        assert!(matches!(forward(&p, &[0.0, f64::NAN, 0.0, 0.0], &cam), Err(RegressorError::NonFiniteFeature)));
        assert!(matches!(forward(&p, &[0.0], &cam), Err(RegressorError::FeatureDim { .. })));
    }

    #[test]
    fn clamp_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(clamp_schedule(0.0, &cfg), 50.0);
        assert_eq!(clamp_schedule(1.0, &cfg), 1.0);
        assert_eq!(clamp_schedule(0.5, &cfg), 25.5);
    }

    #[test]
    fn clamp_is_near_identity_for_small_errors() {
        for w in [1.0, 7.0, 50.0] {
            for i in 1..=100 {
                let r = w / 10.0 * i as f64 / 100.0;
                let rh = clamp_error(r, w);
                assert!((rh - r).abs() <= 0.01 * r, "w={w} r={r} rh={rh}");
            }
        }
    }

    #[test]
    fn clamp_is_monotone_and_bounded() {
        let w = 3.0;
        let mut prev = 0.0;
        for i in 1..2000 {
            let r = i as f64 * 0.005;
            let rh = clamp_error(r, w);
            assert!(rh > prev && rh < w);
            prev = rh;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().iterations(), 4);
        let bad = TrainConfig { epochs_total: 18, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { tau_prompt_pct: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let p = RegressorParams::init(tiny(), Vector3::new(0.5, 0.0, 1.0), 4.0, 3);
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes, Path::new("p.bin")).unwrap();
        assert_eq!(q, quantize(&p));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("p.bin")).is_err());
        assert!(decode_checkpoint(b"EGFSX", Path::new("p.bin")).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = AdamState::new(2);
        let mut v = vec![1.0, -1.0];
        st.update(&mut v, &[0.5, -2.0], 0.1);
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }
}
