use std::hint::black_box;

use aoa_bench::desk_scenes;
use aoa_core::array::steering_matrix;
use aoa_core::baselines::{extract_peaks, iaa_spectrum, IaaConfig};
use aoa_core::matching::{optimal_assignment, LossWeights, MatchCriterion};
use aoa_core::model::{init_weights, ModelConfig};
use aoa_core::train::{batch_gradient, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn spectra(c: &mut Criterion) {
    let (geometry, scenes) = desk_scenes(1);
    let cfg = IaaConfig::default();
    let steering = steering_matrix(&geometry, &cfg.grid().unwrap()).unwrap();
    c.bench_function("steering_matrix K=16 G=512", |b| {
        b.iter(|| steering_matrix(black_box(&geometry), &cfg.grid().unwrap()).unwrap())
    });
    c.bench_function("iaa 15 iterations K=16 G=512", |b| {
        b.iter(|| iaa_spectrum(black_box(&scenes[0].snapshot), &steering, &cfg).unwrap())
    });
    let spectrum = iaa_spectrum(&scenes[0].snapshot, &steering, &cfg).unwrap();
    c.bench_function("peak extraction G=512", |b| b.iter(|| extract_peaks(black_box(&spectrum), &cfg.peaks).unwrap()));
}

fn matching(c: &mut Criterion) {
    let (geometry, scenes) = desk_scenes(64);
    let w = init_weights(&ModelConfig::desk(), 0).unwrap();
    let preds = w.forward(&geometry, &scenes[0].snapshot).unwrap();
    let scene = scenes.iter().find(|s| s.targets.len() == 4).unwrap();
    let crit = MatchCriterion::new(LossWeights::default(), 120.0, 17.0);
    c.bench_function("assignment N=4 M=16", |b| {
        b.iter(|| optimal_assignment(black_box(&scene.targets), &preds, &crit).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let (geometry, scenes) = desk_scenes(256);
    let snaps: Vec<_> = scenes.iter().map(|s| s.snapshot.clone()).collect();
    let w = init_weights(&ModelConfig::desk(), 0).unwrap();
    c.bench_function("desk forward single", |b| b.iter(|| w.forward(&geometry, black_box(&snaps[0])).unwrap()));
    c.bench_function("desk forward batch 256", |b| b.iter(|| w.forward_batch(&geometry, black_box(&snaps)).unwrap()));
    let tc = TrainConfig::desk();
    let crit = tc.criterion();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("desk gradient batch 256", |b| {
        b.iter(|| batch_gradient(&w, &geometry, black_box(&scenes), &crit, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, spectra, matching, network);
criterion_main!(benches);
