use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use egfs_core::egfs::{build_buffer, compute_error_maps};
use egfs_core::eval::localize_frames;
use egfs_core::pose_solver::RansacConfig;
use egfs_core::regressor::{loss_and_grad, RegressorParams, TrainConfig};
use egfs_core::synth::{generate_scene, SceneConfig};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if n > 1 {
        sizes.push(n);
    }
    let backend = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    sizes
        .into_iter()
        .map(|t| (format!("{backend}/{t}"), rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap()))
        .collect()
}

fn bench(c: &mut Criterion) {
    let cfg = SceneConfig { n_train_frames: 20, n_test_frames: 8, ..SceneConfig::default() };
    let (scene, train, test) = generate_scene(&cfg).unwrap();
    let tc = TrainConfig::default();
    let mut params = RegressorParams::init(tc.architecture, scene.scene_center, scene.scene_radius, 0);
    params.confidence_trained = true;
    let buffer = build_buffer(&train, None, 0, 0);
    let batch: Vec<usize> = (0..tc.batch_size).collect();
    let ransac = RansacConfig::default();

    let mut g = c.benchmark_group("loss_and_grad");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| loss_and_grad(&params, &buffer, &batch, 0.5, &tc)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("error_maps");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| pool.install(|| compute_error_maps(&params, &train))));
    }
    g.finish();

    let mut g = c.benchmark_group("localize");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| localize_frames(&params, &test, &ransac, true)))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
