//! Trains one scene in several sampling modes and prints test-set errors.
//!
//! `cargo run --release --example ablation -- <seed> <n_train> <width> <height> [epochs] [n_test]`

use std::time::Instant;

use egfs_core::egfs::{run_training, RegionExpander, SamplingMode};

use egfs_core::eval::{aggregate, frame_errors, localize_frames, region_analysis};
use egfs_core::pose_solver::RansacConfig;
use egfs_core::regressor::TrainConfig;
use egfs_core::synth::{generate_scene, label_shares, RegionLabel, SceneConfig};

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let arg = |i: usize, d: u64| args.get(i).copied().unwrap_or(d);
    let seed = arg(0, 0);
    let scene_cfg = SceneConfig {
        seed,
        n_train_frames: arg(1, 30) as usize,
        n_test_frames: arg(5, 20) as usize,
        width: arg(2, 160) as u32,
        height: arg(3, 120) as u32,
        focal: 260.0 * arg(2, 160) as f64 / 320.0,
        ..SceneConfig::default()
    };
    let (scene, train, test) = generate_scene(&scene_cfg).unwrap();
    println!("shares {:?}", label_shares(&train));
    let ransac = RansacConfig { seed, ..RansacConfig::default() };
    let epochs = arg(4, 20) as usize;
    let grow = RegionExpander::default();
    let modes: Vec<(&str, SamplingMode, bool, RegionExpander)> = vec![
        ("random", SamplingMode::Random, false, grow.clone()),
        ("masks", SamplingMode::Egfs, false, grow.clone()),
        ("conf", SamplingMode::Random, true, grow.clone()),
        ("full", SamplingMode::Egfs, true, grow.clone()),
        ("q0.5", SamplingMode::Quantile { q: 0.5 }, true, grow),
    ];
    for (name, mode, conf, expander) in modes {
        let t = Instant::now();
        let cfg = TrainConfig { seed, use_confidence: conf, epochs_total: epochs, ..TrainConfig::default() };
        let out = run_training(&train, scene.scene_center, scene.scene_radius, &cfg, &expander, mode).unwrap();
        let train_s = t.elapsed().as_secs_f64();
        let dyn_fr: Vec<String> = out
            .iterations
            .iter()
            .filter_map(|it| it.audit.as_ref())
            .map(|a| format!("{:.2}/{:.2}/{:.2}", a.dynamic_fraction(), a.textureless_fraction(), a.static_fraction()))
            .collect();
        let res = localize_frames(&out.params, &test, &ransac, true);
        let s = aggregate(&frame_errors(&test, &res)).unwrap();
        let unf = if conf {
            let r2 = localize_frames(&out.params, &test, &ransac, false);
            format!("{:.2}", aggregate(&frame_errors(&test, &r2)).unwrap().median_cm)
        } else {
            "-".into()
        };
        let rs = region_analysis(&out.params, &test, &res);
        let st = rs.get(RegionLabel::StaticTextured);
        let dy = rs.get(RegionLabel::Dynamic);
        println!(
            "{name:7} train {train_s:6.1}s med {:7.2}cm {:6.2}deg pct {:5.1} unfiltered {unf} | static {:.2}px/{:.2} dyn {:.2}px/{:.2} | maskdyn {}",
            s.median_cm,
            s.median_deg,
            s.pct_within_5cm_5deg,
            st.median_error_px.unwrap_or(f64::NAN),
            st.inlier_ratio.unwrap_or(f64::NAN),
            dy.median_error_px.unwrap_or(f64::NAN),
            dy.inlier_ratio.unwrap_or(f64::NAN),
            dyn_fr.join(","),
        );
    }
}
