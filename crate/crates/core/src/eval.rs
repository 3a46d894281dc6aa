//! Localization, pose metrics, per-region analysis and point-cloud export.

use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::egfs::{predict_frame, EgfsMask, FramePrediction};
use crate::geometry::{so3_log, Pose};
use crate::pose_solver::{self, Correspondence, CorrespondenceSet, PoseEstimate, RansacConfig};
use crate::regressor::RegressorParams;
use crate::synth::{Frame, RegionLabel};
use crate::{par, stats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_cm: f64,
    pub rotation_deg: f64,
}

/// Camera-center distance (cm) and relative rotation angle (degrees).
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let translation_cm = (est.center() - gt.center()).norm() * 100.0;
    let angle = so3_log(&(est.rotation.transpose() * gt.rotation)).norm();
    PoseError { translation_cm, rotation_deg: angle.to_degrees() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub median_cm: f64,
    pub median_deg: f64,
    /// Percentage of frames below 5 cm and 5°.
    pub pct_within_5cm_5deg: f64,
}

/// Lower-median errors and the share of frames under 5 cm / 5°.
pub fn aggregate(errors: &[PoseError]) -> Option<Summary> {
    let t: Vec<f64> = errors.iter().map(|e| e.translation_cm).collect();
    let r: Vec<f64> = errors.iter().map(|e| e.rotation_deg).collect();
    let within = errors.iter().filter(|e| e.translation_cm < 5.0 && e.rotation_deg < 5.0).count();
    Some(Summary {
        frames: errors.len(),
        median_cm: stats::lower_median(&t)?,
        median_deg: stats::lower_median(&r)?,
        pct_within_5cm_5deg: 100.0 * within as f64 / errors.len() as f64,
    })
}

/// Localization of one frame.
#[derive(Debug, Clone)]
pub struct FrameLocalization {
    pub frame_id: u32,
    pub estimate: PoseEstimate,
    /// Grid cell of every correspondence handed to RANSAC.
    pub cells: Vec<usize>,
    /// Grid cells of the final inliers.
    pub inlier_cells: Vec<usize>,
    pub n_correspondences: usize,
    pub filtered: bool,
    pub seconds: f64,
}

/// Predicts scene coordinates for every patch, optionally keeps only those
/// with above-median confidence, then runs RANSAC + LM.
pub fn localize_frame(
    params: &RegressorParams,
    frame: &Frame,
    ransac: &RansacConfig,
    confidence_filter: bool,
) -> FrameLocalization {
    let start = Instant::now();
    let pred = predict_frame(params, frame);
    localize_prediction(&pred, frame, ransac, confidence_filter && params.confidence_trained, start)
}

fn localize_prediction(
    pred: &FramePrediction,
    frame: &Frame,
    ransac: &RansacConfig,
    filter: bool,
    start: Instant,
) -> FrameLocalization {
    let all_cells: Vec<usize> = (0..pred.coords.len()).filter(|&i| pred.coords[i].is_finite()).collect();
    let all = CorrespondenceSet {
        items: all_cells
            .iter()
            .map(|&i| Correspondence { p: frame.grid.pixel(i), y: pred.coords[i], c: pred.confidence[i] })
            .collect(),
        intrinsics: frame.intrinsics,
    };
    let (cs, cells) = if filter {
        let kept = pose_solver::confidence_filter(&all, ransac.min_inliers);
        (all.subset(&kept), kept.iter().map(|&k| all_cells[k]).collect())
    } else {
        (all, all_cells)
    };
    let cfg = RansacConfig { seed: crate::rng::stream_seed(ransac.seed, crate::rng::RANSAC, u64::from(frame.frame_id)), ..*ransac };
    let estimate = match pose_solver::ransac_pnp(&cs, &cfg) {
        Ok(e) => e,
        Err(_) => PoseEstimate { pose: Pose::identity(), inliers: Vec::new(), hypothesis_count: 0, converged: false },
    };
    let inlier_cells = estimate.inliers.iter().map(|&i| cells[i]).collect();
    FrameLocalization {
        frame_id: frame.frame_id,
        n_correspondences: cs.len(),
        estimate,
        cells,
        inlier_cells,
        filtered: filter,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Localizes every frame (frames in parallel).
pub fn localize_frames(
    params: &RegressorParams,
    frames: &[Frame],
    ransac: &RansacConfig,
    confidence_filter: bool,
) -> Vec<FrameLocalization> {
    par::map(frames, |f| localize_frame(params, f, ransac, confidence_filter))
}

pub fn frame_errors(frames: &[Frame], results: &[FrameLocalization]) -> Vec<PoseError> {
    frames.iter().zip(results).map(|(f, r)| pose_error(&r.estimate.pose, &f.pose_gt)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: RegionLabel,
    pub count: usize,
    /// `None` when the label does not occur.
    pub median_error_px: Option<f64>,
    pub inlier_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub labels: Vec<LabelStats>,
}

impl RegionStats {
    pub fn get(&self, label: RegionLabel) -> &LabelStats {
        self.labels.iter().find(|l| l.label == label).expect("all labels present")
    }

    pub fn total(&self) -> usize {
        self.labels.iter().map(|l| l.count).sum()
    }
}

/// Per-label median reprojection error (against the ground-truth pose) and
/// share of the label's valid correspondences that ended in the inlier set.
pub fn region_analysis(params: &RegressorParams, frames: &[Frame], results: &[FrameLocalization]) -> RegionStats {
    let mut errors: [Vec<f64>; 3] = Default::default();
    let mut inl = [0usize; 3];
    for (f, res) in frames.iter().zip(results) {
        debug_assert_eq!(f.frame_id, res.frame_id);
        let pred = predict_frame(params, f);
        let mut is_inlier = vec![false; f.grid.len()];
        for &c in &res.inlier_cells {
            is_inlier[c] = true;
        }
        for (cell, e) in pred.errors.errors.iter().enumerate() {
            if let Some(e) = e {
                let l = f.grid.labels[cell].as_u8() as usize;
                errors[l].push(*e);
                inl[l] += usize::from(is_inlier[cell]);
            }
        }
    }
    let labels = RegionLabel::ALL
        .iter()
        .map(|&label| {
            let i = label.as_u8() as usize;
            let count = errors[i].len();
            LabelStats {
                label,
                count,
                median_error_px: stats::lower_median(&errors[i]),
                inlier_ratio: (count > 0).then(|| inl[i] as f64 / count as f64),
            }
        })
        .collect();
    RegionStats { labels }
}

pub fn write_region_csv(out: &mut impl Write, s: &RegionStats) -> io::Result<()> {
    writeln!(out, "label,count,median_error_px,inlier_ratio")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for l in &s.labels {
        writeln!(out, "{},{},{},{}", l.label.name(), l.count, opt(l.median_error_px), opt(l.inlier_ratio))?;
    }
    Ok(())
}

/// Writes an ASCII PLY of predicted scene coordinates coloured by patch
/// appearance. With `apply_filter`, keeps patches with confidence at or above
/// the frame's median and, where a mask for the frame is given, inside it.
/// Returns the number of vertices.
pub fn export_point_cloud(
    out: &mut impl Write,
    params: &RegressorParams,
    frames: &[Frame],
    apply_filter: bool,
    masks: Option<&[EgfsMask]>,
) -> io::Result<usize> {
    let preds = par::map(frames, |f| predict_frame(params, f));
    write_point_cloud(out, frames, &preds, params.confidence_trained && apply_filter, apply_filter, masks)
}

/// [`export_point_cloud`] on precomputed predictions.
pub fn write_point_cloud(
    out: &mut impl Write,
    frames: &[Frame],
    preds: &[FramePrediction],
    confidence_filter: bool,
    mask_filter: bool,
    masks: Option<&[EgfsMask]>,
) -> io::Result<usize> {
    let mut body = String::new();
    let mut n = 0;
    for (f, pred) in frames.iter().zip(preds) {
        let mask = masks.and_then(|ms| ms.iter().find(|m| m.frame_id == f.frame_id)).filter(|_| mask_filter);
        let median = stats::lower_median(&pred.confidence).unwrap_or(0.0);
        for cell in 0..f.grid.len() {
            if confidence_filter && pred.confidence[cell] < median {
                continue;
            }
            if mask.is_some_and(|m| !m.cells[cell]) {
                continue;
            }
            let y = pred.coords[cell].0;
            if !y.iter().all(|v| v.is_finite()) {
                continue;
            }
            let rgb = f.grid.appearance[cell].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            body.push_str(&format!("{:.6} {:.6} {:.6} {} {} {}\n", y.x, y.y, y.z, rgb[0], rgb[1], rgb[2]));
            n += 1;
        }
    }
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )?;
    out.write_all(body.as_bytes())?;
    Ok(n)
}

/// `frame_id,trans_cm,rot_deg,n_inliers,n_corr` rows.
pub fn write_metrics_csv(out: &mut impl Write, rows: &[(u32, PoseError, usize, usize)]) -> io::Result<()> {
    writeln!(out, "frame_id,trans_cm,rot_deg,n_inliers,n_corr")?;
    for (id, e, ni, nc) in rows {
        writeln!(out, "{id},{:.6},{:.6},{ni},{nc}", e.translation_cm, e.rotation_deg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector3;

    #[test]
    fn pose_error_examples() {
        let gt = Pose::new(so3_exp(&Vector3::new(0.1, -0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_error(&gt, &gt), PoseError { translation_cm: 0.0, rotation_deg: 0.0 });
        let shifted = gt.compose(&Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)));
        let e = pose_error(&shifted, &gt);
        assert!((e.translation_cm - 10.0).abs() < 1e-9 && e.rotation_deg < 1e-6);
        let rotated = gt.compose(&Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 30f64.to_radians())), Vector3::zeros()));
        let e = pose_error(&rotated, &gt);
        assert!(e.translation_cm < 1e-9 && (e.rotation_deg - 30.0).abs() < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[PoseError { translation_cm: 3.0, rotation_deg: 3.0 }]).unwrap();
        assert_eq!((s.median_cm, s.median_deg, s.pct_within_5cm_5deg), (3.0, 3.0, 100.0));
        let s = aggregate(&[
            PoseError { translation_cm: 1.0, rotation_deg: 1.0 },
            PoseError { translation_cm: 9.0, rotation_deg: 9.0 },
        ])
        .unwrap();
        assert_eq!(s.pct_within_5cm_5deg, 50.0);
        assert_eq!(s.median_cm, 1.0);
        assert!(aggregate(&[]).is_none());
    }

    #[test]
    fn empty_cloud_is_valid_ply() {
        let p = RegressorParams::zeros(Default::default(), Vector3::zeros(), 1.0);
        let mut buf = Vec::new();
        assert_eq!(export_point_cloud(&mut buf, &p, &[], false, None).unwrap(), 0);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\n") && text.contains("element vertex 0\n") && text.ends_with("end_header\n"));
    }
}
