//! Data-parallel paths on a one-thread pool versus the default pool.
//!
//! `cargo bench -p chowder-core` measures the rayon build; add
//! `--no-default-features` to measure the sequential fallback, where both
//! pool sizes run the same plain loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use chowder::bagstore::{stratified_folds, FeatureBag};
use chowder::experiment::cross_validate;
use chowder::synth::{generate_dataset, SynthConfig};
use chowder::train::{predict_many, train_ensemble};
use chowder::{Arch, TrainConfig};

fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let max = rayon::current_num_threads();
    let mut sizes = vec![1];
    if max > 1 {
        sizes.push(max);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap();
            (n, pool)
        })
        .collect()
}

fn dataset() -> Vec<FeatureBag> {
    generate_dataset(&SynthConfig {
        n_slides: 60,
        ..SynthConfig::localized(1)
    })
    .unwrap()
    .bags
}

fn bench_ensemble(c: &mut Criterion) {
    let bags = dataset();
    let refs: Vec<&FeatureBag> = bags.iter().collect();
    let cfg = TrainConfig {
        epochs: 3,
        ensemble_size: 4,
        ..TrainConfig::default()
    };
    let arch = Arch::chowder(1, 5);
    let mut g = c.benchmark_group("train_ensemble");
    g.sample_size(10);
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("threads", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(train_ensemble(&refs, &arch, &cfg).unwrap())))
        });
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let bags = dataset();
    let refs: Vec<&FeatureBag> = bags.iter().collect();
    let cfg = TrainConfig {
        epochs: 1,
        ensemble_size: 10,
        ..TrainConfig::default()
    };
    let ensemble = train_ensemble(&refs, &Arch::chowder(1, 5), &cfg)
        .unwrap()
        .ensemble;
    let mut g = c.benchmark_group("predict_many");
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("threads", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(predict_many(&ensemble, &refs).unwrap())))
        });
    }
    g.finish();
}

fn bench_cross_validate(c: &mut Criterion) {
    let data = generate_dataset(&SynthConfig {
        n_slides: 60,
        ..SynthConfig::localized(2)
    })
    .unwrap();
    let folds = stratified_folds(&data.labels(), 3, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ensemble_size: 2,
        ..TrainConfig::default()
    };
    let arch = Arch::chowder(1, 5);
    let mut g = c.benchmark_group("cross_validate");
    g.sample_size(10);
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("threads", n), &n, |b, _| {
            b.iter(|| {
                pool.install(|| {
                    black_box(cross_validate(&data.bags, &folds, 3, &arch, &cfg).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn bench_synth(c: &mut Criterion) {
    let cfg = SynthConfig::localized(3);
    let mut g = c.benchmark_group("generate_dataset");
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("threads", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(generate_dataset(&cfg).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_ensemble,
    bench_predict,
    bench_cross_validate,
    bench_synth
);
criterion_main!(benches);
