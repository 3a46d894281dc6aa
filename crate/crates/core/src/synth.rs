//! Synthetic scenes with labelled contamination and their on-disk format.
//!
//! A scene is a closed room tiled with textured quads, a few static boxes
//! near the middle, and upright panels that move between frames. Every image
//! patch gets a feature vector standing in for a learned backbone:
//!
//! - static textured patches encode their own world position,
//! - texture-less patches all encode the centroid of their region,
//! - dynamic patches encode where the point sits in the panel's reference
//!   placement, which disagrees with where it is in the current frame.
//!
//! Train and test cameras orbit the room center on interleaved angles, so the
//! two pose sets are disjoint.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, PixelPoint, Pose, SceneCoordinate};
use crate::rng;

/// Feature dimension.
pub const FEATURE_DIM: usize = 32;
/// Patch stride in pixels.
pub const PATCH: u32 = 8;
/// Per-channel appearance noise.
pub const APPEARANCE_NOISE: f64 = 0.02;

pub const GRID_MAGIC: &[u8; 4] = b"EGFS";
pub const GRID_VERSION: u32 = 1;
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

fn schema(path: &Path, reason: impl Into<String>) -> SynthError {
    SynthError::Schema { path: path.to_path_buf(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionLabel {
    StaticTextured,
    TextureLess,
    Dynamic,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 3] =
        [RegionLabel::StaticTextured, RegionLabel::TextureLess, RegionLabel::Dynamic];

    pub fn as_u8(self) -> u8 {
        match self {
            RegionLabel::StaticTextured => 0,
            RegionLabel::TextureLess => 1,
            RegionLabel::Dynamic => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(RegionLabel::StaticTextured),
            1 => Some(RegionLabel::TextureLess),
            2 => Some(RegionLabel::Dynamic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionLabel::StaticTextured => "static_textured",
            RegionLabel::TextureLess => "texture_less",
            RegionLabel::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_train_frames: usize,
    pub n_test_frames: usize,
    pub dynamic_fraction: f64,
    pub textureless_fraction: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_train_frames: 100,
            n_test_frames: 40,
            dynamic_fraction: 0.3,
            textureless_fraction: 0.2,
            feature_noise_sigma: 0.02,
            seed: 0,
            width: 320,
            height: 240,
            focal: 260.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut bad = Vec::new();
        if !(0.0..1.0).contains(&self.dynamic_fraction) {
            bad.push("dynamic_fraction");
        }
        if !(0.0..1.0).contains(&self.textureless_fraction) {
            bad.push("textureless_fraction");
        }
        if bad.is_empty() && self.dynamic_fraction + self.textureless_fraction >= 1.0 {
            bad.extend(["dynamic_fraction", "textureless_fraction"]);
        }
        if self.n_train_frames < 10 {
            bad.push("n_train_frames");
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            bad.push("feature_noise_sigma");
        }
        if self.width < PATCH || self.height < PATCH || !(self.focal > 0.0) {
            bad.push("width/height/focal");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Config(format!(
                "{} out of range (fractions must lie in [0,1) and sum below 1; n_train_frames >= 10)",
                bad.join(", ")
            )))
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            f64::from(self.width) / 2.0,
            f64::from(self.height) / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Random sinusoidal position encoding `E(x)_j = sin(2π ω_j·x + φ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    /// Spatial frequencies in cycles per meter.
    pub frequencies: Vec<[f64; 3]>,
    pub phases: Vec<f64>,
}

impl Encoding {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut frequencies = Vec::with_capacity(FEATURE_DIM);
        let mut phases = Vec::with_capacity(FEATURE_DIM);
        for _ in 0..FEATURE_DIM {
            let dir = loop {
                let v = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
                if v.norm() > 1e-3 {
                    break v.normalize();
                }
            };
            let magnitude = rng.random_range(0.06..0.45);
            let w = dir * magnitude;
            frequencies.push([w.x, w.y, w.z]);
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self { frequencies, phases }
    }

    pub fn encode(&self, x: &Vector3<f64>) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for (j, o) in out.iter_mut().enumerate() {
            let w = self.frequencies[j];
            let arg = std::f64::consts::TAU * (w[0] * x.x + w[1] * x.y + w[2] * x.z) + self.phases[j];
            *o = arg.sin();
        }
        out
    }
}

/// A planar rectangle `origin + a·edge_u + b·edge_v`, `a, b ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub corners: [[f64; 3]; 4],
    pub label: RegionLabel,
    pub appearance: [f64; 3],
    /// Region id; texture-less tiles sharing a region share one feature.
    pub region: usize,
    /// Owning dynamic object, if any. Corners are then the reference placement.
    pub object: Option<usize>,
}

impl Surface {
    fn from_origin(o: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, appearance: [f64; 3], region: usize) -> Self {
        let c = |p: Vector3<f64>| [p.x, p.y, p.z];
        Self {
            corners: [c(o), c(o + u), c(o + u + v), c(o + v)],
            label: RegionLabel::StaticTextured,
            appearance,
            region,
            object: None,
        }
    }

    fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.corners[0])
    }

    fn edges(&self) -> (Vector3<f64>, Vector3<f64>) {
        let o = self.origin();
        (Vector3::from(self.corners[1]) - o, Vector3::from(self.corners[3]) - o)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.corners.iter().map(|c| Vector3::from(*c)).sum::<Vector3<f64>>() / 4.0
    }

    pub fn area(&self) -> f64 {
        let (u, v) = self.edges();
        u.cross(&v).norm()
    }

    /// Ray parameter of the hit with `origin + t·dir`, if any.
    fn intersect(&self, motion: Option<&Pose>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        // Dynamic surfaces are intersected in the reference frame of the object.
        let (ro, rd) = match motion {
            Some(m) => (m.inverse_transform(origin), m.rotation.transpose() * dir),
            None => (*origin, *dir),
        };
        let o = self.origin();
        let (u, v) = self.edges();
        let n = u.cross(&v);
        let denom = n.dot(&rd);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(o - ro)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let q = ro + rd * t - o;
        let a = q.dot(&u) / u.norm_squared();
        let b = q.dot(&v) / v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

/// Rigid motion of a dynamic object relative to its reference placement.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTrajectory {
    pub object: usize,
    /// `(frame_id, motion)`: world point = motion · reference point.
    pub motions: Vec<(u32, Pose)>,
}

impl DynamicTrajectory {
    pub fn motion(&self, frame_id: u32) -> Option<&Pose> {
        self.motions.iter().find(|(id, _)| *id == frame_id).map(|(_, m)| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub intrinsics: CameraIntrinsics,
    pub scene_center: Vector3<f64>,
    /// Largest distance from `scene_center` to any static surface corner.
    pub scene_radius: f64,
    pub encoding: Encoding,
    pub surfaces: Vec<Surface>,
    pub dynamic_trajectories: Vec<DynamicTrajectory>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

/// Per-frame patch grid. Stored in single precision, as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub frame_id: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `FEATURE_DIM` values per cell.
    pub features: Vec<f32>,
    pub appearance: Vec<[f32; 3]>,
    pub gt_coords: Vec<[f32; 3]>,
    pub labels: Vec<RegionLabel>,
    pub pixels: Vec<[f32; 2]>,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature(&self, cell: usize) -> &[f32] {
        &self.features[cell * FEATURE_DIM..(cell + 1) * FEATURE_DIM]
    }

    pub fn pixel(&self, cell: usize) -> PixelPoint {
        let p = self.pixels[cell];
        PixelPoint(Vector2::new(f64::from(p[0]), f64::from(p[1])))
    }

    pub fn gt_coord(&self, cell: usize) -> SceneCoordinate {
        let g = self.gt_coords[cell];
        SceneCoordinate::new(f64::from(g[0]), f64::from(g[1]), f64::from(g[2]))
    }

    pub fn appearance(&self, cell: usize) -> Vector3<f64> {
        let a = self.appearance[cell];
        Vector3::new(f64::from(a[0]), f64::from(a[1]), f64::from(a[2]))
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, cell % self.cols)
    }

    /// 4-neighbours of `cell`.
    pub fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.row_col(cell);
        let up = (r > 0).then(|| cell - self.cols);
        let down = (r + 1 < self.rows).then(|| cell + self.cols);
        let left = (c > 0).then(|| cell - 1);
        let right = (c + 1 < self.cols).then(|| cell + 1);
        [up, down, left, right].into_iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u32,
    pub pose_gt: Pose,
    pub intrinsics: CameraIntrinsics,
    pub grid: FeatureGrid,
}

pub fn grid_shape(width: u32, height: u32) -> (usize, usize) {
    (height.div_ceil(PATCH) as usize, width.div_ceil(PATCH) as usize)
}

/// Patch centers, clipped to the image for partial border patches.
pub fn patch_center(row: usize, col: usize, width: u32, height: u32) -> Vector2<f64> {
    let lo_u = col as f64 * f64::from(PATCH);
    let hi_u = ((col + 1) as f64 * f64::from(PATCH)).min(f64::from(width));
    let lo_v = row as f64 * f64::from(PATCH);
    let hi_v = ((row + 1) as f64 * f64::from(PATCH)).min(f64::from(height));
    Vector2::new(0.5 * (lo_u + hi_u), 0.5 * (lo_v + hi_v))
}

const ROOM_HALF: f64 = 4.0;
const ROOM_HEIGHT: f64 = 3.0;
const TILE: f64 = 1.0;
const ORBIT_RADIUS: f64 = 2.6;
const CAMERA_HEIGHT: f64 = 1.5;
const N_PANELS: usize = 3;
const PANEL_AMPLITUDE: f64 = 0.5;
const TILE_SHADE: f64 = 0.01;

/// Output of rendering one camera: the nearest surface per patch and the hit point.
struct RenderedCell {
    surface: Option<usize>,
    hit: Vector3<f64>,
}

struct Layout {
    surfaces: Vec<Surface>,
    /// Surface indices that tile each wall, in (wall, i, j) order for adjacency.
    wall_tiles: Vec<(usize, usize, usize, usize)>,
    panel_base: Vec<(Vector3<f64>, f64, [f64; 3])>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// Base colors for coherent groups of surfaces (a wall, a box, a panel, a
/// texture-less blob), kept apart so appearance-based growing stops at
/// group borders.
#[derive(Default)]
struct Palette {
    used: Vec<[f64; 3]>,
}

impl Palette {
    const SEPARATION: f64 = 0.2;

    fn next(&mut self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let mut color = random_color(rng);
        for _ in 0..200 {
            let far = self.used.iter().all(|u| u.iter().zip(&color).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= Self::SEPARATION);
            if far {
                break;
            }
            color = random_color(rng);
        }
        self.used.push(color);
        color
    }
}

/// `base` with a small per-surface offset, so neighbouring tiles of one group
/// stay within growing tolerance of each other.
fn shade(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-TILE_SHADE..TILE_SHADE))
}

/// Origin, u axis, v axis, u length, v length.
type WallSpec = (Vector3<f64>, Vector3<f64>, Vector3<f64>, f64, f64);

fn build_static_layout(rng: &mut ChaCha8Rng, palette: &mut Palette) -> Layout {
    let mut surfaces = Vec::new();
    let mut wall_tiles = Vec::new();
    let h = ROOM_HALF;
    // Floor, ceiling and four walls.
    let walls: [WallSpec; 6] = [
        (Vector3::new(-h, -h, 0.0), Vector3::x(), Vector3::y(), 2.0 * h, 2.0 * h),
        (Vector3::new(-h, -h, ROOM_HEIGHT), Vector3::x(), Vector3::y(), 2.0 * h, 2.0 * h),
        (Vector3::new(-h, -h, 0.0), Vector3::x(), Vector3::z(), 2.0 * h, ROOM_HEIGHT),
        (Vector3::new(-h, h, 0.0), Vector3::x(), Vector3::z(), 2.0 * h, ROOM_HEIGHT),
        (Vector3::new(-h, -h, 0.0), Vector3::y(), Vector3::z(), 2.0 * h, ROOM_HEIGHT),
        (Vector3::new(h, -h, 0.0), Vector3::y(), Vector3::z(), 2.0 * h, ROOM_HEIGHT),
    ];
    for (w, (o, u, v, lu, lv)) in walls.iter().enumerate() {
        let nu = (lu / TILE).round() as usize;
        let nv = (lv / TILE).round() as usize;
        let (su, sv) = (lu / nu as f64, lv / nv as f64);
        let base = palette.next(rng);
        for i in 0..nu {
            for j in 0..nv {
                let origin = o + u * (i as f64 * su) + v * (j as f64 * sv);
                let idx = surfaces.len();
                surfaces.push(Surface::from_origin(origin, u * su, v * sv, shade(base, rng), idx));
                wall_tiles.push((w, i, j, idx));
            }
        }
    }
    // Static boxes around the middle of the room.
    let boxes = [(Vector3::new(-0.7, 0.5, 0.0), 0.7), (Vector3::new(0.6, -0.6, 0.0), 0.6), (Vector3::new(0.3, 0.8, 0.0), 0.45)];
    for (base, size) in boxes {
        let o = base - Vector3::new(size / 2.0, size / 2.0, 0.0);
        let (ex, ey, ez) = (Vector3::x() * size, Vector3::y() * size, Vector3::z() * size * 1.3);
        let base = palette.next(rng);
        for (fo, fu, fv) in [
            (o, ex, ey),
            (o + ez, ex, ey),
            (o, ex, ez),
            (o + ey, ex, ez),
            (o, ey, ez),
            (o + ex, ey, ez),
        ] {
            let idx = surfaces.len();
            surfaces.push(Surface::from_origin(fo, fu, fv, shade(base, rng), idx));
        }
    }
    let mut panel_base = Vec::new();
    for k in 0..N_PANELS {
        let angle = std::f64::consts::TAU * (k as f64 + rng.random_range(0.0..0.6)) / N_PANELS as f64;
        let radius = rng.random_range(0.6..1.2);
        let center = Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        panel_base.push((center, yaw, palette.next(rng)));
    }
    Layout { surfaces, wall_tiles, panel_base }
}

fn panel_surface(center: Vector3<f64>, yaw: f64, scale: f64, color: [f64; 3], object: usize, region: usize) -> Surface {
    let width = 0.8 * scale;
    let height = (1.6 * scale).min(ROOM_HEIGHT - 0.05);
    let u = Vector3::new(yaw.cos(), yaw.sin(), 0.0) * width;
    let o = center - u * 0.5 + Vector3::new(0.0, 0.0, 0.02);
    let mut s = Surface::from_origin(o, u, Vector3::z() * height, color, region);
    s.label = RegionLabel::Dynamic;
    s.object = Some(object);
    s
}

fn camera_pose(angle: f64, rng: &mut ChaCha8Rng, center: &Vector3<f64>) -> Pose {
    let r = ORBIT_RADIUS + rng.random_range(-0.25..0.25);
    let eye = Vector3::new(r * angle.cos(), r * angle.sin(), CAMERA_HEIGHT + rng.random_range(-0.2..0.2));
    let target = center + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
    Pose::look_at(eye, target, Vector3::z())
}

/// Panel motion relative to its reference placement at trajectory time `time`.
fn panel_motion(time: f64, k: usize, center: &Vector3<f64>, phases: &[f64; 3]) -> Pose {
    let w = 1.0 + 0.37 * k as f64;
    let dx = PANEL_AMPLITUDE * (w * time + phases[0]).sin();
    let dy = PANEL_AMPLITUDE * (0.8 * w * time + phases[1]).sin();
    let yaw = 0.5 * (0.6 * w * time + phases[2]).sin();
    let rot = crate::geometry::so3_exp(&Vector3::new(0.0, 0.0, yaw));
    // Rotate about the panel's own vertical axis, then translate.
    let t = center - rot * center + Vector3::new(dx, dy, 0.0);
    Pose::new(rot, t)
}

struct Camera {
    frame_id: u32,
    pose: Pose,
    time: f64,
}

fn render(
    surfaces: &[Surface],
    motions: &[Pose],
    cam: &Pose,
    k: &CameraIntrinsics,
) -> Vec<RenderedCell> {
    let (rows, cols) = grid_shape(k.width, k.height);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let uv = patch_center(r, c, k.width, k.height);
            let dir = cam.rotation * k.unproject(&uv);
            let mut best: Option<(f64, usize)> = None;
            for (i, s) in surfaces.iter().enumerate() {
                let motion = s.object.map(|o| &motions[o]);
                if let Some(t) = s.intersect(motion, &cam.translation, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            let (t, surface) = match best {
                Some((t, i)) => (t, Some(i)),
                None => (crate::geometry::DUMMY_DEPTH, None),
            };
            // dir has unit z in the camera frame, so t is the camera-frame depth.
            out.push(RenderedCell { surface, hit: cam.translation + dir * t });
        }
    }
    out
}

/// Deterministically generates a scene with train and test frames.
pub fn generate_scene(config: &SceneConfig) -> Result<(SyntheticScene, Vec<Frame>, Vec<Frame>), SynthError> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, rng::SCENE, 0);
    let k = config.intrinsics();
    let scene_center = Vector3::new(0.0, 0.0, 0.9);
    let encoding = Encoding::random(&mut rng);
    let mut palette = Palette::default();
    let layout = build_static_layout(&mut rng, &mut palette);
    let n_static = layout.surfaces.len();

    let mut cameras = Vec::new();
    let n_train = config.n_train_frames;
    let n_test = config.n_test_frames;
    for i in 0..n_train {
        let angle = std::f64::consts::TAU * i as f64 / n_train as f64;
        cameras.push(Camera { frame_id: i as u32, pose: camera_pose(angle, &mut rng, &scene_center), time: angle * 3.0 });
    }
    for j in 0..n_test {
        let angle = std::f64::consts::TAU * (j as f64 + 0.5) / n_test as f64 + 0.5 * std::f64::consts::TAU / n_train as f64;
        cameras.push(Camera { frame_id: (n_train + j) as u32, pose: camera_pose(angle, &mut rng, &scene_center), time: angle * 3.0 });
    }
    let phases: Vec<[f64; 3]> = (0..N_PANELS)
        .map(|_| [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)])
        .collect();
    let motions_for = |cam: &Camera| -> Vec<Pose> {
        layout
            .panel_base
            .iter()
            .enumerate()
            .map(|(p, (c, _, _))| panel_motion(cam.time, p, c, &phases[p]))
            .collect()
    };
    let cam_motions: Vec<Vec<Pose>> = cameras.iter().map(motions_for).collect();

    let total_train_cells = (n_train * {
        let (r, c) = grid_shape(k.width, k.height);
        r * c
    }) as f64;
    let count_train = |surfaces: &[Surface]| -> Vec<usize> {
        let mut counts = vec![0usize; surfaces.len() + 1];
        for (cam, motions) in cameras.iter().zip(&cam_motions).take(n_train) {
            for cell in render(surfaces, motions, &cam.pose, &k) {
                counts[cell.surface.unwrap_or(surfaces.len())] += 1;
            }
        }
        counts
    };

    // Size the panels so the dynamic share of train patches matches the config.
    let mut surfaces = layout.surfaces.clone();
    if config.dynamic_fraction > 0.0 {
        let mut scale = (config.dynamic_fraction / 0.1).sqrt();
        for _ in 0..8 {
            surfaces.truncate(n_static);
            for (p, (c, yaw, color)) in layout.panel_base.iter().enumerate() {
                let region = surfaces.len();
                surfaces.push(panel_surface(*c, *yaw, scale, *color, p, region));
            }
            let counts = count_train(&surfaces);
            let dynamic: usize = counts[n_static..surfaces.len()].iter().sum();
            let share = dynamic as f64 / total_train_cells;
            if (share - config.dynamic_fraction).abs() < 0.01 {
                break;
            }
            let ratio = (config.dynamic_fraction / share.max(1e-3)).clamp(0.5, 2.0);
            scale *= ratio.sqrt();
        }
    }

    // Grow texture-less regions over visible wall tiles until the target share is met.
    if config.textureless_fraction > 0.0 {
        let counts = count_train(&surfaces);
        let target = config.textureless_fraction * total_train_cells;
        let mut assigned = 0.0;
        let mut taken = vec![false; layout.wall_tiles.len()];
        let visible: Vec<usize> = (0..layout.wall_tiles.len()).filter(|&t| counts[layout.wall_tiles[t].3] > 0).collect();
        let mut guard = 0;
        while assigned < target - 0.5 * total_train_cells * 0.01 && guard < 1000 {
            guard += 1;
            let free: Vec<usize> = visible.iter().copied().filter(|&t| !taken[t]).collect();
            if free.is_empty() {
                break;
            }
            let seed_tile = free[rng.random_range(0..free.len())];
            let region = layout.wall_tiles[seed_tile].3;
            let color = palette.next(&mut rng);
            let mut queue = VecDeque::from([seed_tile]);
            let mut blob = 0;
            while let Some(t) = queue.pop_front() {
                if taken[t] {
                    continue;
                }
                let n = counts[layout.wall_tiles[t].3] as f64;
                if assigned + n > target + 0.02 * total_train_cells {
                    continue;
                }
                taken[t] = true;
                assigned += n;
                blob += 1;
                let s = &mut surfaces[layout.wall_tiles[t].3];
                s.label = RegionLabel::TextureLess;
                s.region = region;
                s.appearance = color;
                if blob >= 6 || assigned >= target {
                    break;
                }
                let (w, i, j, _) = layout.wall_tiles[t];
                for (u, &(w2, i2, j2, _)) in layout.wall_tiles.iter().enumerate() {
                    if w2 == w && !taken[u] && i.abs_diff(i2) + j.abs_diff(j2) == 1 && counts[layout.wall_tiles[u].3] > 0 {
                        queue.push_back(u);
                    }
                }
            }
        }
    }

    let scene_radius = surfaces
        .iter()
        .filter(|s| s.object.is_none())
        .flat_map(|s| s.corners.iter())
        .map(|c| (Vector3::from(*c) - scene_center).norm())
        .fold(0.0, f64::max);

    // Texture-less regions encode their area-weighted centroid.
    let mut region_centroid = vec![(Vector3::zeros(), 0.0); surfaces.len()];
    for s in &surfaces {
        let a = s.area();
        region_centroid[s.region].0 += s.centroid() * a;
        region_centroid[s.region].1 += a;
    }
    let region_code: Vec<Option<[f64; FEATURE_DIM]>> = region_centroid
        .iter()
        .map(|(c, a)| (*a > 0.0).then(|| encoding.encode(&(c / *a))))
        .collect();

    let noise = Normal::new(0.0, 1.0).unwrap();
    let sigma = config.feature_noise_sigma;
    let (rows, cols) = grid_shape(k.width, k.height);
    let mut frames = Vec::with_capacity(cameras.len());
    for (cam, motions) in cameras.iter().zip(&cam_motions) {
        let cells = render(&surfaces, motions, &cam.pose, &k);
        let n = cells.len();
        let mut grid = FeatureGrid {
            frame_id: cam.frame_id,
            rows,
            cols,
            features: Vec::with_capacity(n * FEATURE_DIM),
            appearance: Vec::with_capacity(n),
            gt_coords: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            pixels: Vec::with_capacity(n),
        };
        for (idx, cell) in cells.iter().enumerate() {
            let (r, c) = (idx / cols, idx % cols);
            let uv = patch_center(r, c, k.width, k.height);
            let (label, base_color, code) = match cell.surface {
                Some(si) => {
                    let s = &surfaces[si];
                    let code = match s.label {
                        RegionLabel::StaticTextured => encoding.encode(&cell.hit),
                        RegionLabel::TextureLess => region_code[s.region].unwrap(),
                        RegionLabel::Dynamic => {
                            let reference = motions[s.object.unwrap()].inverse_transform(&cell.hit);
                            encoding.encode(&reference)
                        }
                    };
                    (s.label, s.appearance, code)
                }
                None => (RegionLabel::TextureLess, [0.5, 0.5, 0.5], encoding.encode(&scene_center)),
            };
            for v in code {
                grid.features.push((v + sigma * noise.sample(&mut rng)) as f32);
            }
            let mut app = [0f32; 3];
            for (a, b) in app.iter_mut().zip(base_color) {
                *a = (b + APPEARANCE_NOISE * noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
            grid.appearance.push(app);
            grid.gt_coords.push([cell.hit.x as f32, cell.hit.y as f32, cell.hit.z as f32]);
            grid.labels.push(label);
            grid.pixels.push([uv.x as f32, uv.y as f32]);
        }
        frames.push(Frame { frame_id: cam.frame_id, pose_gt: cam.pose, intrinsics: k, grid });
    }

    let dynamic_trajectories = (0..layout.panel_base.len())
        .filter(|_| config.dynamic_fraction > 0.0)
        .map(|p| DynamicTrajectory {
            object: p,
            motions: cameras.iter().zip(&cam_motions).map(|(c, m)| (c.frame_id, m[p])).collect(),
        })
        .collect();
    let test = frames.split_off(n_train);
    let scene = SyntheticScene {
        config: config.clone(),
        intrinsics: k,
        scene_center,
        scene_radius,
        encoding,
        surfaces,
        dynamic_trajectories,
        train_ids: frames.iter().map(|f| f.frame_id).collect(),
        test_ids: test.iter().map(|f| f.frame_id).collect(),
    };
    Ok((scene, frames, test))
}

/// Full-precision render of one frame, used to audit renderer self-consistency.
pub fn render_hits(scene: &SyntheticScene, frame_id: u32, pose: &Pose) -> Vec<Option<Vector3<f64>>> {
    let motions: Vec<Pose> = (0..scene.surfaces.iter().filter_map(|s| s.object).max().map_or(0, |m| m + 1))
        .map(|o| {
            scene
                .dynamic_trajectories
                .iter()
                .find(|t| t.object == o)
                .and_then(|t| t.motion(frame_id))
                .copied()
                .unwrap_or_default()
        })
        .collect();
    render(&scene.surfaces, &motions, pose, &scene.intrinsics)
        .into_iter()
        .map(|c| c.surface.map(|_| c.hit))
        .collect()
}

/// Fraction of cells per label over `frames`.
pub fn label_shares(frames: &[Frame]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    for f in frames {
        for l in &f.grid.labels {
            counts[l.as_u8() as usize] += 1;
            total += 1;
        }
    }
    counts.map(|c| c as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Dataset I/O

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    seed: u64,
    config: SceneConfig,
    intrinsics: CameraIntrinsics,
    scene_center: [f64; 3],
    scene_radius: f64,
    feature_dim: usize,
    patch: u32,
    encoding: Encoding,
    surfaces: Vec<Surface>,
    dynamic_trajectories: Vec<TrajectoryFile>,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    object: usize,
    /// `[frame_id, qw, qx, qy, qz, tx, ty, tz]`
    motions: Vec<(u32, [f64; 4], [f64; 3])>,
}

fn pose_to_parts(p: &Pose) -> ([f64; 4], [f64; 3]) {
    (p.quaternion_wxyz(), [p.translation.x, p.translation.y, p.translation.z])
}

fn pose_from_parts(q: [f64; 4], t: [f64; 3]) -> Pose {
    Pose::from_quaternion(q, Vector3::from(t))
}

/// Writes `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn encode_grid(grid: &FeatureGrid) -> Vec<u8> {
    let n = grid.len();
    let mut buf = Vec::with_capacity(20 + n * (4 * (FEATURE_DIM + 8) + 1));
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, grid.rows as u32, grid.cols as u32, FEATURE_DIM as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        for v in grid.feature(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in grid.appearance[i].iter().chain(&grid.gt_coords[i]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(grid.labels[i].as_u8());
        for v in &grid.pixels[i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_grid(bytes: &[u8], frame_id: u32, path: &Path) -> Result<FeatureGrid, SynthError> {
    if bytes.len() < 20 {
        return Err(schema(path, "truncated header"));
    }
    if &bytes[0..4] != GRID_MAGIC {
        return Err(schema(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, rows, cols, dim) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != GRID_VERSION {
        return Err(schema(path, format!("grid version {version}, expected {GRID_VERSION}")));
    }
    if dim != FEATURE_DIM {
        return Err(schema(path, format!("feature dimension {dim}, expected {FEATURE_DIM}")));
    }
    let cell_bytes = 4 * (dim + 3 + 3) + 1 + 8;
    let n = rows * cols;
    if bytes.len() != 20 + n * cell_bytes {
        return Err(schema(path, format!("expected {} bytes, found {}", 20 + n * cell_bytes, bytes.len())));
    }
    let mut grid = FeatureGrid {
        frame_id,
        rows,
        cols,
        features: Vec::with_capacity(n * dim),
        appearance: Vec::with_capacity(n),
        gt_coords: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n),
    };
    let mut at = 20;
    let f32_at = |at: &mut usize| {
        let v = f32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
        *at += 4;
        v
    };
    for _ in 0..n {
        for _ in 0..dim {
            grid.features.push(f32_at(&mut at));
        }
        grid.appearance.push([f32_at(&mut at), f32_at(&mut at), f32_at(&mut at)]);
        grid.gt_coords.push([f32_at(&mut at), f32_at(&mut at), f32_at(&mut at)]);
        let label = RegionLabel::from_u8(bytes[at]).ok_or_else(|| schema(path, format!("bad label {}", bytes[at])))?;
        at += 1;
        grid.labels.push(label);
        grid.pixels.push([f32_at(&mut at), f32_at(&mut at)]);
    }
    Ok(grid)
}

/// Writes a dataset directory: `scene.json`, `poses.txt` and `grids/<frame_id>.bin`.
pub fn write_dataset(path: &Path, scene: &SyntheticScene, frames: &[Frame]) -> Result<(), SynthError> {
    fs::create_dir_all(path.join("grids")).map_err(io_err(path))?;
    let file = SceneFile {
        version: SCENE_VERSION,
        seed: scene.config.seed,
        config: scene.config.clone(),
        intrinsics: scene.intrinsics,
        scene_center: scene.scene_center.into(),
        scene_radius: scene.scene_radius,
        feature_dim: FEATURE_DIM,
        patch: PATCH,
        encoding: scene.encoding.clone(),
        surfaces: scene.surfaces.clone(),
        dynamic_trajectories: scene
            .dynamic_trajectories
            .iter()
            .map(|t| TrajectoryFile {
                object: t.object,
                motions: t
                    .motions
                    .iter()
                    .map(|(id, m)| {
                        let (q, tr) = pose_to_parts(m);
                        (*id, q, tr)
                    })
                    .collect(),
            })
            .collect(),
        train_ids: scene.train_ids.clone(),
        test_ids: scene.test_ids.clone(),
    };
    let json = serde_json::to_vec_pretty(&file).expect("scene serializes");
    let scene_path = path.join("scene.json");
    write_atomic(&scene_path, &json).map_err(io_err(&scene_path))?;

    let mut poses = String::new();
    for f in frames {
        let (q, t) = pose_to_parts(&f.pose_gt);
        poses.push_str(&format!(
            "{} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}\n",
            f.frame_id, q[0], q[1], q[2], q[3], t[0], t[1], t[2]
        ));
    }
    let poses_path = path.join("poses.txt");
    write_atomic(&poses_path, poses.as_bytes()).map_err(io_err(&poses_path))?;

    for f in frames {
        let p = path.join("grids").join(format!("{}.bin", f.frame_id));
        write_atomic(&p, &encode_grid(&f.grid)).map_err(io_err(&p))?;
    }
    Ok(())
}

/// A loaded dataset with frames split by the scene's train/test id lists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: SyntheticScene,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

pub fn read_dataset(path: &Path) -> Result<Dataset, SynthError> {
    let scene_path = path.join("scene.json");
    let text = fs::read(&scene_path).map_err(io_err(&scene_path))?;
    let file: SceneFile =
        serde_json::from_slice(&text).map_err(|e| schema(&scene_path, e.to_string()))?;
    if file.version != SCENE_VERSION {
        return Err(schema(&scene_path, format!("scene version {}, expected {SCENE_VERSION}", file.version)));
    }
    if file.feature_dim != FEATURE_DIM || file.patch != PATCH {
        return Err(schema(&scene_path, "unsupported feature dimension or patch size"));
    }
    let scene = SyntheticScene {
        config: file.config,
        intrinsics: file.intrinsics,
        scene_center: Vector3::from(file.scene_center),
        scene_radius: file.scene_radius,
        encoding: file.encoding,
        surfaces: file.surfaces,
        dynamic_trajectories: file
            .dynamic_trajectories
            .into_iter()
            .map(|t| DynamicTrajectory {
                object: t.object,
                motions: t.motions.into_iter().map(|(id, q, tr)| (id, pose_from_parts(q, tr))).collect(),
            })
            .collect(),
        train_ids: file.train_ids,
        test_ids: file.test_ids,
    };

    let poses_path = path.join("poses.txt");
    let reader = BufReader::new(fs::File::open(&poses_path).map_err(io_err(&poses_path))?);
    let mut poses = std::collections::BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&poses_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(schema(&poses_path, format!("line {}: expected 8 fields", n + 1)));
        }
        let id: u32 = fields[0].parse().map_err(|_| schema(&poses_path, format!("line {}: bad frame id", n + 1)))?;
        let mut v = [0.0; 7];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            *slot = s.parse().map_err(|_| schema(&poses_path, format!("line {}: bad number", n + 1)))?;
        }
        poses.insert(id, pose_from_parts([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]]));
    }

    let load = |ids: &[u32]| -> Result<Vec<Frame>, SynthError> {
        ids.iter()
            .map(|&id| {
                let p = path.join("grids").join(format!("{id}.bin"));
                let mut bytes = Vec::new();
                fs::File::open(&p).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(&p))?;
                let grid = decode_grid(&bytes, id, &p)?;
                let pose_gt = *poses.get(&id).ok_or_else(|| schema(&poses_path, format!("missing pose for frame {id}")))?;
                if grid_shape(scene.intrinsics.width, scene.intrinsics.height) != (grid.rows, grid.cols) {
                    return Err(schema(&p, "grid shape does not match intrinsics"));
                }
                Ok(Frame { frame_id: id, pose_gt, intrinsics: scene.intrinsics, grid })
            })
            .collect()
    };
    let train = load(&scene.train_ids)?;
    let test = load(&scene.test_ids)?;
    Ok(Dataset { scene, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig { n_train_frames: 12, n_test_frames: 3, seed, width: 160, height: 120, focal: 130.0, ..Default::default() }
    }

    #[test]
    fn grid_shape_rounds_up() {
        assert_eq!(grid_shape(320, 240), (30, 40));
        assert_eq!(grid_shape(321, 241), (31, 41));
        let c = patch_center(30, 40, 321, 241);
        assert_eq!(c, Vector2::new(320.5, 240.5));
    }

    #[test]
    fn rejects_bad_fractions() {
        let cfg = SceneConfig { dynamic_fraction: 0.6, textureless_fraction: 0.5, ..Default::default() };
        let err = generate_scene(&cfg).unwrap_err().to_string();
        assert!(err.contains("dynamic_fraction") && err.contains("textureless_fraction"), "{err}");
        let cfg = SceneConfig { n_train_frames: 5, ..Default::default() };
        assert!(generate_scene(&cfg).is_err());
    }

    #[test]
    fn is_deterministic() {
        let (s1, a, b) = generate_scene(&small(3)).unwrap();
        let (s2, c, d) = generate_scene(&small(3)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!(a.iter().all(|f| f.grid.labels.contains(&RegionLabel::StaticTextured)));
    }

    #[test]
    fn truncated_grid_is_a_schema_error() {
        let (_, frames, _) = generate_scene(&small(1)).unwrap();
        let bytes = encode_grid(&frames[0].grid);
        for cut in [0, 10, 19, bytes.len() - 1] {
            let err = decode_grid(&bytes[..cut], 0, Path::new("x.bin")).unwrap_err();
            assert!(matches!(err, SynthError::Schema { .. }));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_grid(&bad, 0, Path::new("x.bin")), Err(SynthError::Schema { .. })));
    }
}
