//! Deterministic fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osfl_core::nnkit::build_classifier;
use osfl_core::{CapabilityMatrices, DiffModel, LogitBatch};

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Capability matrices for `c` classes and `m` clients with strictly
/// positive raw entries.
pub fn caps(c: usize, m: usize) -> CapabilityMatrices {
    let u = uniform(c, m, 0.5, 2.5, 1);
    CapabilityMatrices::from_raw(u, 1e-8).expect("valid capability matrix")
}

/// One logit batch per client, sharing labels.
pub fn logit_batches(m: usize, b: usize, c: usize) -> Vec<LogitBatch> {
    let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
    (0..m)
        .map(|k| {
            let logits = uniform(b, c, -3.0, 3.0, 7 + k as u64);
            LogitBatch::new(logits, labels.clone()).expect("consistent batch")
        })
        .collect()
}

/// Untrained classifiers; stratification cost does not depend on weights.
pub fn clients(m: usize, feature_dim: usize, c: usize) -> Vec<DiffModel> {
    (0..m)
        .map(|k| build_classifier("mlp_small", feature_dim, c, k as u64).expect("known architecture"))
        .collect()
}
