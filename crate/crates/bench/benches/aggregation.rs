use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use osfl_bench::{caps, logit_batches};
use osfl_core::{hard_labels, stratified_aggregate};

fn aggregate(c: &mut Criterion) {
    let mut group = c.benchmark_group("stratified_aggregate");
    for m in [2usize, 5, 10, 20] {
        let caps = caps(10, m);
        let batches = logit_batches(m, 128, 10);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| {
                let p = stratified_aggregate(black_box(&batches), black_box(&caps)).unwrap();
                hard_labels(&p)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, aggregate);
criterion_main!(benches);
