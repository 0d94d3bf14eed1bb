use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use osfl_bench::clients;
use osfl_core::nnkit::OptimizerKind;
use osfl_core::{model_stratification, StratifyConfig};

fn stratify(c: &mut Criterion) {
    let cfg = StratifyConfig {
        steps: 10,
        lr: 1e-2,
        batch_size: 32,
        parallel: false,
        optimizer: OptimizerKind::Adam,
        ..StratifyConfig::default()
    };
    let mut group = c.benchmark_group("model_stratification");
    group.sample_size(10);
    for m in [2usize, 4, 8] {
        let models = clients(m, 10, 10);
        group.bench_with_input(BenchmarkId::new("serial", m * 10), &m, |b, _| {
            b.iter(|| model_stratification(black_box(&models), &cfg, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stratify);
criterion_main!(benches);
