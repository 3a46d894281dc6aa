//! Pose from 2D–3D correspondences: confidence prefilter, P3P inside RANSAC,
//! and Levenberg–Marquardt refinement on the inliers.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{se3_exp, CameraIntrinsics, PixelPoint, Pose, SceneCoordinate, MIN_DEPTH};
use crate::{par, rng, stats};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SolverError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p: PixelPoint,
    pub y: SceneCoordinate,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub items: Vec<Correspondence>,
    pub intrinsics: CameraIntrinsics,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet { items: idx.iter().map(|&i| self.items[i]).collect(), intrinsics: self.intrinsics }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_hypotheses: usize,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold_px: 10.0, max_hypotheses: 256, seed: 0, min_inliers: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Camera-to-world.
    pub pose: Pose,
    /// Indices into the correspondence set passed to [`ransac_pnp`].
    pub inliers: Vec<usize>,
    pub hypothesis_count: usize,
    pub converged: bool,
}

/// Pixel error of one correspondence under a camera-to-world pose, or `None`
/// if the point is behind the camera.
pub fn residual(pose: &Pose, k: &CameraIntrinsics, c: &Correspondence) -> Option<f64> {
    let pc = pose.inverse_transform(&c.y.0);
    (pc.z > MIN_DEPTH).then(|| (k.project_camera(&pc) - c.p.0).norm())
}

/// Keeps correspondences whose confidence is strictly above the median.
///
/// Returns the kept indices. Falls back to every index when fewer than
/// `min_inliers` would survive.
pub fn confidence_filter(cs: &CorrespondenceSet, min_inliers: usize) -> Vec<usize> {
    let conf: Vec<f64> = cs.items.iter().map(|c| c.c).collect();
    let Some(median) = stats::interpolated_median(&conf) else {
        return Vec::new();
    };
    let kept: Vec<usize> = (0..cs.len()).filter(|&i| conf[i] > median).collect();
    if kept.len() < min_inliers {
        log::info!("confidence filter kept {} of {}; using the unfiltered set", kept.len(), cs.len());
        return (0..cs.len()).collect();
    }
    kept
}

fn bearing(k: &CameraIntrinsics, p: &PixelPoint) -> Vector3<f64> {
    k.unproject(&p.0).normalize()
}

/// Real roots of `a4 v⁴ + a3 v³ + a2 v² + a1 v + a0` via companion-matrix
/// eigenvalues, polished with Newton steps.
fn quartic_roots(a: [f64; 5]) -> Vec<f64> {
    let [a4, a3, a2, a1, a0] = a;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let eval = |v: f64| (((a4 * v + a3) * v + a2) * v + a1) * v + a0;
    let deriv = |v: f64| ((4.0 * a4 * v + 3.0 * a3) * v + 2.0 * a2) * v + a1;
    let raw: Vec<f64> = if a4.abs() < 1e-12 * scale {
        // Degenerates to a cubic or lower; fall back to the companion matrix of that.
        return cubic_or_lower(a3, a2, a1, a0);
    } else {
        let c = Matrix4::new(
            0.0, 0.0, 0.0, -a0 / a4,
            1.0, 0.0, 0.0, -a1 / a4,
            0.0, 1.0, 0.0, -a2 / a4,
            0.0, 0.0, 1.0, -a3 / a4,
        );
        c.complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
            .map(|z| z.re)
            .collect()
    };
    raw.into_iter()
        .map(|mut v| {
            for _ in 0..8 {
                let d = deriv(v);
                if d == 0.0 {
                    break;
                }
                let step = eval(v) / d;
                v -= step;
                if step.abs() < 1e-15 * (1.0 + v.abs()) {
                    break;
                }
            }
            v
        })
        .collect()
}

fn cubic_or_lower(a3: f64, a2: f64, a1: f64, a0: f64) -> Vec<f64> {
    let scale = a3.abs().max(a2.abs()).max(a1.abs()).max(a0.abs());
    if a3.abs() > 1e-12 * scale {
        let c = Matrix3::new(0.0, 0.0, -a0 / a3, 1.0, 0.0, -a1 / a3, 0.0, 1.0, -a2 / a3);
        c.complex_eigenvalues().iter().filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs())).map(|z| z.re).collect()
    } else if a2.abs() > 1e-12 * scale {
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc < 0.0 {
            Vec::new()
        } else {
            let s = disc.sqrt();
            vec![(-a1 + s) / (2.0 * a2), (-a1 - s) / (2.0 * a2)]
        }
    } else if a1.abs() > 1e-12 * scale {
        vec![-a0 / a1]
    } else {
        Vec::new()
    }
}

/// Rigid transform `(R, t)` with `dst ≈ R src + t` (Kabsch).
fn absolute_orientation(src: &[Vector3<f64>; 3], dst: &[Vector3<f64>; 3]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let cs = (src[0] + src[1] + src[2]) / 3.0;
    let cd = (dst[0] + dst[1] + dst[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (dst[i] - cd) * (src[i] - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some((r, cd - r * cs))
}

/// Minimal pose solver on three correspondences (Grunert's quartic).
///
/// Returns up to four camera-to-world candidates; each reprojects the three
/// points within `1e-6` px. Collinear world points yield no candidates.
pub fn p3p(points: &[Correspondence; 3], k: &CameraIntrinsics) -> Vec<Pose> {
    let w: [Vector3<f64>; 3] = [points[0].y.0, points[1].y.0, points[2].y.0];
    if 0.5 * (w[1] - w[0]).cross(&(w[2] - w[0])).norm() <= 1e-9 {
        return Vec::new();
    }
    let j: [Vector3<f64>; 3] = [bearing(k, &points[0].p), bearing(k, &points[1].p), bearing(k, &points[2].p)];
    let a2 = (w[1] - w[2]).norm_squared();
    let b2 = (w[0] - w[2]).norm_squared();
    let c2 = (w[0] - w[1]).norm_squared();
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a,
        4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g + 2.0 * c2 / b2 * cos_a * cos_a * cos_b),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cos_b * cos_b + 2.0 * bmc * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cos_g * cos_g),
        4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b - (1.0 - apc) * cos_a * cos_g),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g,
    ];

    let mut out: Vec<Pose> = Vec::new();
    for v in quartic_roots(coeffs) {
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / denom;
        let q = 1.0 + v * v - 2.0 * v * cos_b;
        if q <= 0.0 || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let cam = [j[0] * s1, j[1] * (u * s1), j[2] * (v * s1)];
        let Some((r, t)) = absolute_orientation(&w, &cam) else { continue };
        // (r, t) maps world to camera; store camera-to-world.
        let pose = Pose::new(r, t).inverse();
        let ok = points.iter().all(|c| residual(&pose, k, c).is_some_and(|e| e <= 1e-6));
        if ok && !out.iter().any(|p| (p.rotation - pose.rotation).amax() < 1e-9 && (p.translation - pose.translation).amax() < 1e-9) {
            out.push(pose);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Score {
    count: usize,
    mean_error: f64,
}

fn score(pose: &Pose, cs: &CorrespondenceSet, threshold: f64) -> Score {
    let mut count = 0;
    let mut sum = 0.0;
    for c in &cs.items {
        if let Some(e) = residual(pose, &cs.intrinsics, c) {
            if e <= threshold {
                count += 1;
                sum += e;
            }
        }
    }
    Score { count, mean_error: if count > 0 { sum / count as f64 } else { f64::INFINITY } }
}

/// Indices of correspondences within `threshold` px under `pose`.
pub fn inliers(pose: &Pose, cs: &CorrespondenceSet, threshold: f64) -> Vec<usize> {
    (0..cs.len())
        .filter(|&i| residual(pose, &cs.intrinsics, &cs.items[i]).is_some_and(|e| e <= threshold))
        .collect()
}

/// Draws the seeded sequence of minimal samples.
pub fn sample_triples(n: usize, count: usize, seed: u64) -> Vec<[usize; 3]> {
    let mut rng = rng::stream(seed, rng::RANSAC, 0);
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let (lo, hi) = (a.min(b), a.max(b));
            let mut c = rng.random_range(0..n - 2);
            if c >= lo {
                c += 1;
            }
            if c >= hi {
                c += 1;
            }
            [a, b, c]
        })
        .collect()
}

/// RANSAC over P3P hypotheses, then LM refinement on the best inlier set.
///
/// Hypotheses are scored in parallel; the winner is the largest inlier count,
/// then the lowest mean inlier error, then the earliest sample, so the result
/// does not depend on evaluation order.
pub fn ransac_pnp(cs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<PoseEstimate, SolverError> {
    if cs.len() < 3 {
        return Err(SolverError::TooFewCorrespondences(cs.len()));
    }
    let triples = sample_triples(cs.len(), cfg.max_hypotheses, cfg.seed);
    let scored: Vec<Vec<(Pose, Score)>> = par::map(&triples, |t| {
        let pts = [cs.items[t[0]], cs.items[t[1]], cs.items[t[2]]];
        p3p(&pts, &cs.intrinsics)
            .into_iter()
            .map(|pose| {
                let s = score(&pose, cs, cfg.inlier_threshold_px);
                (pose, s)
            })
            .collect()
    });
    let hypothesis_count = scored.iter().map(Vec::len).sum();
    let mut best: Option<(Pose, Score)> = None;
    for (pose, s) in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some((_, b)) => s.count > b.count || (s.count == b.count && s.mean_error < b.mean_error),
        };
        if better {
            best = Some((pose, s));
        }
    }
    let Some((pose, s)) = best else {
        return Ok(PoseEstimate { pose: Pose::identity(), inliers: Vec::new(), hypothesis_count, converged: false });
    };
    if s.count < cfg.min_inliers {
        let inl = inliers(&pose, cs, cfg.inlier_threshold_px);
        return Ok(PoseEstimate { pose, inliers: inl, hypothesis_count, converged: false });
    }
    let mut pose = pose;
    let mut inl = inliers(&pose, cs, cfg.inlier_threshold_px);
    for _ in 0..2 {
        pose = lm_refine(&pose, &cs.subset(&inl));
        let next = inliers(&pose, cs, cfg.inlier_threshold_px);
        if next == inl {
            break;
        }
        inl = next;
        if inl.len() < cfg.min_inliers {
            break;
        }
    }
    let converged = inl.len() >= cfg.min_inliers;
    Ok(PoseEstimate { pose, inliers: inl, hypothesis_count, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmTrace {
    pub pose: Pose,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

fn lm_cost(r: &Matrix3<f64>, t: &Vector3<f64>, cs: &CorrespondenceSet) -> f64 {
    let k = &cs.intrinsics;
    let mut cost = 0.0;
    for c in &cs.items {
        let pc = r * c.y.0 + t;
        if pc.z <= MIN_DEPTH {
            return f64::INFINITY;
        }
        cost += (k.project_camera(&pc) - c.p.0).norm_squared();
    }
    cost
}

/// Levenberg–Marquardt on the summed squared reprojection error.
pub fn lm_refine(pose0: &Pose, cs: &CorrespondenceSet) -> Pose {
    lm_refine_traced(pose0, cs).pose
}

/// [`lm_refine`] with the accepted-cost history.
///
/// Works on the world-to-camera transform `T` with left updates
/// `T ← exp(δ) T`, `δ = [ρ; ω]`.
pub fn lm_refine_traced(pose0: &Pose, cs: &CorrespondenceSet) -> LmTrace {
    let k = &cs.intrinsics;
    let inv = pose0.inverse();
    let (mut r, mut t) = (inv.rotation, inv.translation);
    let mut cost = lm_cost(&r, &t, cs);
    let mut costs = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    if cs.is_empty() || !cost.is_finite() {
        return LmTrace { pose: *pose0, costs, iterations };
    }
    while iterations < 100 {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in &cs.items {
            let pc = r * c.y.0 + t;
            let iz = 1.0 / pc.z;
            let e: Vector2<f64> = k.project_camera(&pc) - c.p.0;
            let jp = nalgebra::Matrix2x3::new(
                k.fx * iz, 0.0, -k.fx * pc.x * iz * iz,
                0.0, k.fy * iz, -k.fy * pc.y * iz * iz,
            );
            let mut jx = nalgebra::Matrix3x6::<f64>::zeros();
            jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-crate::geometry::hat(&pc)));
            let j = jp * jx;
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = h;
            for i in 0..6 {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let step = se3_exp(&delta);
            let r_new = step.rotation * r;
            let t_new = step.rotation * t + step.translation;
            let new_cost = lm_cost(&r_new, &t_new, cs);
            if new_cost < cost {
                let decrease = cost - new_cost;
                r = r_new;
                t = t_new;
                cost = new_cost;
                costs.push(cost);
                lambda /= 10.0;
                accepted = true;
                if delta.norm() < 1e-10 || decrease < 1e-12 {
                    return LmTrace { pose: Pose::new(r, t).inverse().renormalized(), costs, iterations };
                }
                break;
            }
            lambda *= 10.0;
            if delta.norm() < 1e-10 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    LmTrace { pose: Pose::new(r, t).inverse().renormalized(), costs, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    fn corr(y: Vector3<f64>, pose: &Pose) -> Correspondence {
        let p = project(&SceneCoordinate(y), pose, &k()).pixel().unwrap();
        Correspondence { p, y: SceneCoordinate(y), c: 0.5 }
    }

    #[test]
    fn filter_examples() {
        let mk = |cs: &[f64]| CorrespondenceSet {
            items: cs.iter().map(|&c| Correspondence { p: PixelPoint::new(0.0, 0.0), y: SceneCoordinate::new(0.0, 0.0, 1.0), c }).collect(),
            intrinsics: k(),
        };
        assert_eq!(confidence_filter(&mk(&[0.3; 10]), 6), (0..10).collect::<Vec<_>>());
        assert_eq!(confidence_filter(&mk(&[0.9]), 6), vec![0]);
        let c: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(confidence_filter(&mk(&c), 6), (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn collinear_points_have_no_solution() {
        let pose = Pose::identity();
        let pts = [
            corr(Vector3::new(0.0, 0.0, 4.0), &pose),
            corr(Vector3::new(0.5, 0.5, 4.0), &pose),
            corr(Vector3::new(1.0, 1.0, 4.0), &pose),
        ];
        assert!(p3p(&pts, &k()).is_empty());
    }

    #[test]
    fn fronto_parallel_identity() {
        let pose = Pose::identity();
        let pts = [
            corr(Vector3::new(-1.0, -0.5, 5.0), &pose),
            corr(Vector3::new(1.0, -0.5, 5.0), &pose),
            corr(Vector3::new(0.0, 0.8, 5.0), &pose),
        ];
        let sols = p3p(&pts, &k());
        assert!(sols.iter().any(|s| (s.rotation - Matrix3::identity()).amax() < 1e-6 && s.translation.amax() < 1e-6), "{sols:?}");
    }

    #[test]
    fn quartic_roots_of_known_polynomial() {
        // (v-1)(v-2)(v+3)(v-0.5) = v⁴ - 0.5v³ - 7v² + 9.5v - 3
        let mut r = quartic_roots([1.0, -0.5, -7.0, 9.5, -3.0]);
        r.sort_by(f64::total_cmp);
        let expect = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_correspondences() {
        let cs = CorrespondenceSet { items: vec![], intrinsics: k() };
        assert_eq!(ransac_pnp(&cs, &RansacConfig::default()), Err(SolverError::TooFewCorrespondences(0)));
    }

    #[test]
    fn triples_are_distinct() {
        for t in sample_triples(5, 500, 1) {
            assert!(t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && t.iter().all(|&i| i < 5));
        }
    }
}
