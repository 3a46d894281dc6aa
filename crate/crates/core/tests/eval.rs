use egfs_core::egfs::{predict_frames, EgfsMask, ErrorMap, FramePrediction};
use egfs_core::eval::*;
use egfs_core::geometry::{se3_exp, Pose};
use egfs_core::pose_solver::RansacConfig;
use egfs_core::regressor::{Architecture, RegressorParams};
use egfs_core::synth::{generate_scene, Frame, RegionLabel, SceneConfig};
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn twist() -> impl Strategy<Value = Vector6<f64>> {
    proptest::array::uniform6(-1.0..1.0f64).prop_map(Vector6::from)
}

proptest! {
    #[test]
    fn pose_error_is_symmetric(a in twist(), b in twist()) {
        let (x, y) = (se3_exp(&a), se3_exp(&b));
        let (e1, e2) = (pose_error(&x, &y), pose_error(&y, &x));
        prop_assert!((e1.translation_cm - e2.translation_cm).abs() < 1e-9);
        prop_assert!((e1.rotation_deg - e2.rotation_deg).abs() < 1e-9);
        let same = pose_error(&x, &x);
        prop_assert!(same.translation_cm < 1e-12 && same.rotation_deg < 1e-9);
    }

    #[test]
    fn aggregate_is_permutation_invariant(
        errs in proptest::collection::vec((0.0..20.0f64, 0.0..20.0f64), 1..40),
        seed in any::<u64>(),
    ) {
        let errors: Vec<PoseError> = errs.iter().map(|&(t, r)| PoseError { translation_cm: t, rotation_deg: r }).collect();
        let mut shuffled = errors.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(aggregate(&errors), aggregate(&shuffled));
    }
}

#[test]
fn translation_and_rotation_examples() {
    let gt = Pose::identity();
    let moved = Pose::new(gt.rotation, Vector3::new(0.03, 0.04, 0.0));
    assert!((pose_error(&moved, &gt).translation_cm - 5.0).abs() < 1e-9);
    let turned = se3_exp(&Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 10f64.to_radians()));
    let e = pose_error(&turned, &gt);
    assert!((e.rotation_deg - 10.0).abs() < 1e-9);
    assert!(aggregate(&[]).is_none());
}

struct Fixture {
    frames: Vec<Frame>,
    params: RegressorParams,
}

fn fixture() -> Fixture {
    let cfg = SceneConfig { n_train_frames: 10, n_test_frames: 3, width: 96, height: 64, focal: 80.0, ..SceneConfig::default() };
    let (scene, _, test) = generate_scene(&cfg).unwrap();
    let arch = Architecture { width: 16, depth: 2, conf_hidden: 8, ..Architecture::default() };
    let mut params = RegressorParams::init(arch, scene.scene_center, scene.scene_radius, 4);
    params.confidence_trained = true;
    Fixture { frames: test, params }
}

#[test]
fn region_counts_partition_valid_predictions() {
    let fx = fixture();
    let results = localize_frames(&fx.params, &fx.frames, &RansacConfig::default(), true);
    let stats = region_analysis(&fx.params, &fx.frames, &results);
    let valid: usize = predict_frames(&fx.params, &fx.frames).iter().map(|p| p.errors.valid_errors().len()).sum();
    assert_eq!(stats.total(), valid);
    assert_eq!(stats.labels.len(), 3);
    for l in &stats.labels {
        if let Some(r) = l.inlier_ratio {
            assert!((0.0..=1.0).contains(&r));
        }
    }
    let mut csv = Vec::new();
    write_region_csv(&mut csv, &stats).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("label,count,median_error_px,inlier_ratio\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn localization_is_deterministic() {
    let fx = fixture();
    let cfg = RansacConfig::default();
    let a = localize_frames(&fx.params, &fx.frames, &cfg, true);
    let b = localize_frames(&fx.params, &fx.frames, &cfg, true);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.estimate, y.estimate);
        assert_eq!(x.inlier_cells, y.inlier_cells);
    }
    // Without a trained confidence head the filter is skipped.
    let untrained = RegressorParams { confidence_trained: false, ..fx.params.clone() };
    assert!(localize_frames(&untrained, &fx.frames, &cfg, true).iter().all(|r| !r.filtered));
}

/// A prediction that returns ground truth everywhere.
fn perfect(frames: &[Frame]) -> Vec<FramePrediction> {
    frames
        .iter()
        .map(|f| {
            let n = f.grid.len();
            FramePrediction {
                frame_id: f.frame_id,
                coords: (0..n).map(|c| f.grid.gt_coord(c)).collect(),
                confidence: (0..n).map(|c| ((c * 37) % 101) as f64 / 101.0).collect(),
                errors: ErrorMap { frame_id: f.frame_id, rows: f.grid.rows, cols: f.grid.cols, errors: vec![Some(0.0); n] },
            }
        })
        .collect()
}

fn vertices(ply: &[u8]) -> Vec<[f64; 3]> {
    let text = std::str::from_utf8(ply).unwrap();
    let (header, body) = text.split_once("end_header\n").unwrap();
    let n: usize = header.lines().find_map(|l| l.strip_prefix("element vertex ")).unwrap().parse().unwrap();
    let v: Vec<[f64; 3]> = body
        .lines()
        .map(|l| {
            let f: Vec<f64> = l.split(' ').take(3).map(|x| x.parse().unwrap()).collect();
            [f[0], f[1], f[2]]
        })
        .collect();
    assert_eq!(v.len(), n);
    v
}

#[test]
fn perfect_predictions_give_ground_truth_cloud() {
    let fx = fixture();
    let preds = perfect(&fx.frames);
    let mut out = Vec::new();
    let n = write_point_cloud(&mut out, &fx.frames, &preds, false, false, None).unwrap();
    let v = vertices(&out);
    assert_eq!(n, fx.frames.iter().map(|f| f.grid.len()).sum::<usize>());
    let gt: Vec<Vector3<f64>> = fx.frames.iter().flat_map(|f| (0..f.grid.len()).map(|c| f.grid.gt_coord(c).0)).collect();
    for (p, g) in v.iter().zip(&gt) {
        assert!((Vector3::from(*p) - g).norm() <= 1e-3);
    }
}

#[test]
fn filtering_only_removes_points() {
    let fx = fixture();
    let preds = perfect(&fx.frames);
    let masks: Vec<EgfsMask> = fx
        .frames
        .iter()
        .map(|f| EgfsMask {
            frame_id: f.frame_id,
            rows: f.grid.rows,
            cols: f.grid.cols,
            cells: (0..f.grid.len()).map(|c| f.grid.labels[c] == RegionLabel::StaticTextured).collect(),
            iteration: 4,
            expander: "t".into(),
        })
        .collect();
    let cloud = |conf: bool, mask: bool| {
        let mut out = Vec::new();
        write_point_cloud(&mut out, &fx.frames, &preds, conf, mask, Some(&masks)).unwrap();
        let mut v: Vec<String> = vertices(&out).iter().map(|p| format!("{:?}", p)).collect();
        v.sort();
        v
    };
    let all = cloud(false, false);
    for filtered in [cloud(true, false), cloud(false, true), cloud(true, true)] {
        assert!(filtered.len() < all.len());
        let mut pool = all.clone();
        for p in &filtered {
            let i = pool.binary_search(p).expect("filtered point present in the full cloud");
            pool.remove(i);
        }
    }
    let empty: Vec<Frame> = Vec::new();
    let mut out = Vec::new();
    assert_eq!(write_point_cloud(&mut out, &empty, &[], true, true, None).unwrap(), 0);
}
