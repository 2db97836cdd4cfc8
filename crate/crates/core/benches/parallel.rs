//! Sequential vs rayon executor on the three data-parallel paths: scene
//! generation, one training step's per-scene gradients, and the gradient
//! check suite. Build with `--no-default-features` to compile rayon out.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rrnet_core::frame::build_params;
use rrnet_core::gradcheck::run_suite;
use rrnet_core::par::Executor;
use rrnet_core::synthdata::generate_dataset;
use rrnet_core::trainer::{batch_step, prepare, TrainConfig};

fn executors() -> Vec<(String, Executor)> {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    vec![
        ("sequential".to_string(), Executor::sequential()),
        (format!("rayon-{threads}"), Executor::new(threads)),
    ]
}

fn generation(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("generate_64_scenes");
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(black_box(&cfg.data), 64, &exec).expect("generation"))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let data = generate_dataset(&cfg.data, 16, &Executor::sequential()).expect("generation");
    let (images, targets) = prepare(&data, &Executor::sequential());
    let store = build_params(&cfg.frame, &cfg.dims(), 0).expect("params");
    let mut group = c.benchmark_group("batch_step_b8");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_step(&cfg, black_box(&store), &images, &targets, 0, &exec).expect("step"))
        });
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_suite");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_suite(black_box(0), None, &exec)));
    }
    group.finish();
}

criterion_group!(benches, generation, train_step, gradcheck);
criterion_main!(benches);
