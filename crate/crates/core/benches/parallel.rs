//! Single-threaded pool versus the default pool on the data-parallel hot
//! paths. Build with `--no-default-features` to bench the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grnet::datamodel::{generate_synthetic, Batch, SynthSpec};
use grnet::metrics::aggregate;
use grnet::model::{Grnet, ModelConfig};
use grnet::par;
use grnet::tensor::Tensor;

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("1-thread", Some(1)), ("default", None)]
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let net = Grnet::new(&cfg).unwrap();
    let store = net.init_params(0);
    let data = generate_synthetic(&SynthSpec {
        n_samples: 4,
        image_size: cfg.input_size,
        ..SynthSpec::default()
    })
    .unwrap();
    let batch = Batch::collate(&data.iter().collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("model_forward_desk_b4");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || net.predict(&store, black_box(&batch.rgb), &batch.depth).unwrap()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let data = generate_synthetic(&SynthSpec {
        n_samples: 16,
        image_size: 64,
        ..SynthSpec::default()
    })
    .unwrap();
    let pairs: Vec<(Tensor, Tensor)> = data
        .iter()
        .map(|s| (s.depth.map(|v| v.clamp(0.0, 1.0)), s.gt.clone()))
        .collect();
    let mut group = c.benchmark_group("metrics_aggregate_16x64");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || aggregate(black_box(&pairs)).unwrap()))
        });
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let spec = SynthSpec {
        n_samples: 32,
        image_size: 64,
        ..SynthSpec::default()
    };
    let mut group = c.benchmark_group("synthetic_32x64");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || generate_synthetic(black_box(&spec)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, metrics, synthesis);
criterion_main!(benches);
