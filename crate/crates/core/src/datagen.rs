//! Desk-scale labelled data and client partitioners.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

/// Radius multiplier applied to the class-mean curve.
pub const MEAN_SCALE: f64 = 1.5;

/// Default number of whole-partition redraws when a Dirichlet draw leaves a
/// client empty.
pub const DEFAULT_MAX_RETRIES: usize = 100;

/// Features with integer class labels in `[0, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for dataset of {}",
                self.len()
            )));
        }
        let features = self.features.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            features,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// Rows of `batch` in order.
    pub(crate) fn rows(&self, batch: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(ndarray::Axis(0), batch),
            batch.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Class means on a closed trigonometric curve: coordinate `2f` is
/// `cos(2π(f+1)j/c)` and `2f+1` is the matching sine, scaled by
/// [`MEAN_SCALE`]. Distinct classes get distinct, well-spread means for any
/// `feature_dim >= 2`.
pub fn class_means(c: usize, feature_dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((c, feature_dim), |(j, d)| {
        let freq = (d / 2 + 1) as f64;
        let angle = 2.0 * PI * freq * j as f64 / c as f64;
        let v = if d % 2 == 0 { angle.cos() } else { angle.sin() };
        MEAN_SCALE * v
    })
}

/// Isotropic Gaussian blobs around [`class_means`], `n_per_class` samples per
/// class in class-major order.
pub fn make_synthetic_dataset(
    c: usize,
    n_per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if c < 2 || n_per_class == 0 || feature_dim < 2 {
        return Err(Error::invalid(format!(
            "need c >= 2, n_per_class >= 1, feature_dim >= 2 (got {c}, {n_per_class}, {feature_dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let means = class_means(c, feature_dim);
    let mut rng = rng::rng_for(seed, &[rng::tag("blobs")]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = c * n_per_class;
    let mut features = Array2::zeros((n, feature_dim));
    let mut labels = Vec::with_capacity(n);
    for j in 0..c {
        for s in 0..n_per_class {
            let i = j * n_per_class + s;
            for d in 0..feature_dim {
                features[[i, d]] = means[[j, d]] + spread * normal.sample(&mut rng);
            }
            labels.push(j);
        }
    }
    LabeledDataset::new(features, labels, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Dirichlet,
    TwoClass,
    Iid,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Scenario::Dirichlet),
            "two_class" | "2c/c" => Ok(Scenario::TwoClass),
            "iid" => Ok(Scenario::Iid),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Per-client index lists into a parent dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scenario_tag: Scenario,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    /// Check disjointness, range and non-emptiness against a parent of
    /// `parent_len` samples.
    pub fn validate(&self, parent_len: usize) -> Result<()> {
        let mut seen = vec![false; parent_len];
        for (k, list) in self.client_indices.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("client {k} has no samples")));
            }
            for &i in list {
                if i >= parent_len {
                    return Err(Error::invalid(format!("client {k} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn shards(&self, dataset: &LabeledDataset) -> Result<Vec<LabeledDataset>> {
        self.client_indices.iter().map(|idx| dataset.subset(idx)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn indices_by_class(dataset: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Draw from `Dir(alpha, ..., alpha)` over `m` components.
///
/// Works in log space (`Gamma(α) = Gamma(α+1)·U^{1/α}`) so very small
/// concentrations do not underflow every component to zero.
pub fn sample_dirichlet(rng: &mut LabRng, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..m)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Integer counts summing to `n` that follow `proportions`, rounding by
/// largest remainder (ties to the lower index).
pub fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per-class Dirichlet allocation of samples to `m` clients.
pub fn partition_dirichlet(
    dataset: &LabeledDataset,
    m: usize,
    alpha: f64,
    seed: u64,
    max_retries: usize,
) -> Result<PartitionSpec> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let by_class = indices_by_class(dataset);
    let mut rng = rng::rng_for(seed, &[rng::tag("dirichlet")]);
    let mut empty_client = 0;
    for _attempt in 0..=max_retries {
        let mut clients = vec![Vec::new(); m];
        for class_indices in &by_class {
            let mut idx = class_indices.clone();
            idx.shuffle(&mut rng);
            let props = sample_dirichlet(&mut rng, alpha, m);
            let counts = largest_remainder(&props, idx.len());
            let mut start = 0;
            for (client, count) in clients.iter_mut().zip(counts) {
                client.extend_from_slice(&idx[start..start + count]);
                start += count;
            }
        }
        match clients.iter().position(Vec::is_empty) {
            Some(k) => empty_client = k,
            None => {
                for c in &mut clients {
                    c.sort_unstable();
                }
                return Ok(PartitionSpec {
                    scenario_tag: Scenario::Dirichlet,
                    alpha: Some(alpha),
                    seed: Some(seed),
                    client_indices: clients,
                });
            }
        }
    }
    Err(Error::PartitionFailure {
        client: empty_client,
        retries: max_retries,
    })
}

/// Client `k` receives every sample of classes `2k` and `2k+1`.
pub fn partition_two_class(dataset: &LabeledDataset, m: usize) -> Result<PartitionSpec> {
    if m == 0 || 2 * m != dataset.n_classes() {
        return Err(Error::invalid(format!(
            "two-class partition needs 2·m = c (m = {m}, c = {})",
            dataset.n_classes()
        )));
    }
    let by_class = indices_by_class(dataset);
    let client_indices = (0..m)
        .map(|k| {
            let mut v = [by_class[2 * k].as_slice(), by_class[2 * k + 1].as_slice()].concat();
            v.sort_unstable();
            v
        })
        .collect();
    Ok(PartitionSpec {
        scenario_tag: Scenario::TwoClass,
        alpha: None,
        seed: None,
        client_indices,
    })
}

/// Class-stratified uniform split: every class is dealt round-robin, with
/// the starting client rotating between classes.
pub fn partition_iid(dataset: &LabeledDataset, m: usize, seed: u64) -> Result<PartitionSpec> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if dataset.len() < m {
        return Err(Error::invalid(format!(
            "{} samples cannot fill {m} clients",
            dataset.len()
        )));
    }
    let mut rng = rng::rng_for(seed, &[rng::tag("iid")]);
    let mut clients = vec![Vec::new(); m];
    let mut next = 0;
    for mut idx in indices_by_class(dataset) {
        idx.shuffle(&mut rng);
        for i in idx {
            clients[next].push(i);
            next = (next + 1) % m;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionSpec {
        scenario_tag: Scenario::Iid,
        alpha: None,
        seed: Some(seed),
        client_indices: clients,
    })
}

/// `m × c` table: entry `(k, j)` counts class-`j` samples held by client `k`.
pub fn heterogeneity_summary(partition: &PartitionSpec, dataset: &LabeledDataset) -> Array2<usize> {
    let mut table = Array2::zeros((partition.n_clients(), dataset.n_classes()));
    for (k, list) in partition.client_indices.iter().enumerate() {
        for &i in list {
            table[[k, dataset.labels()[i]]] += 1;
        }
    }
    table
}

/// Mean Shannon entropy (nats) of the clients' label distributions.
pub fn mean_label_entropy(table: &Array2<usize>) -> f64 {
    let m = table.nrows();
    let total: f64 = table
        .rows()
        .into_iter()
        .map(|row| {
            let n: usize = row.sum();
            if n == 0 {
                return 0.0;
            }
            row.iter()
                .filter(|&&x| x > 0)
                .map(|&x| {
                    let p = x as f64 / n as f64;
                    -p * p.ln()
                })
                .sum::<f64>()
        })
        .sum();
    total / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_spread_samples_sit_on_means() {
        let d = make_synthetic_dataset(2, 1, 2, 0.0, 0).unwrap();
        let means = class_means(2, 2);
        assert_eq!(d.features(), &means);
        assert_eq!(d.labels(), &[0, 1]);
        assert_ne!(means.row(0), means.row(1));
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = make_synthetic_dataset(10, 100, 8, 0.5, 7).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.class_counts(), vec![100; 10]);
        let b = make_synthetic_dataset(10, 100, 8, 0.5, 7).unwrap();
        let bits = |d: &LabeledDataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(make_synthetic_dataset(1, 10, 4, 0.5, 0).is_err());
        assert!(make_synthetic_dataset(3, 0, 4, 0.5, 0).is_err());
        assert!(make_synthetic_dataset(3, 10, 1, 0.5, 0).is_err());
        assert!(make_synthetic_dataset(3, 10, 4, -1.0, 0).is_err());
    }

    #[test]
    fn class_means_are_distinct() {
        let m = class_means(10, 8);
        for i in 0..10 {
            for j in i + 1..10 {
                let d: f64 = (0..8).map(|t| (m[[i, t]] - m[[j, t]]).powi(2)).sum();
                assert!(d > 1.0, "classes {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = make_synthetic_dataset(4, 10, 3, 0.5, 1).unwrap();
        for alpha in [0.01, 1.0, 100.0] {
            let p = partition_dirichlet(&d, 1, alpha, 3, 10).unwrap();
            assert_eq!(p.client_indices, vec![(0..40).collect::<Vec<_>>()]);
        }
    }

    #[test]
    fn dirichlet_exhaustion_reports_failure() {
        // Two samples cannot fill three clients.
        let d = make_synthetic_dataset(2, 1, 2, 0.1, 0).unwrap();
        assert!(matches!(
            partition_dirichlet(&d, 3, 0.5, 0, 5),
            Err(Error::PartitionFailure { retries: 5, .. })
        ));
        assert!(partition_dirichlet(&d, 0, 0.5, 0, 5).is_err());
        assert!(partition_dirichlet(&d, 1, 0.0, 0, 5).is_err());
    }

    #[test]
    fn two_class_layout() {
        let d = make_synthetic_dataset(10, 100, 4, 0.5, 0).unwrap();
        let p = partition_two_class(&d, 5).unwrap();
        let table = heterogeneity_summary(&p, &d);
        let mut row0 = vec![0; 10];
        row0[0] = 100;
        row0[1] = 100;
        assert_eq!(table.row(0).to_vec(), row0);
        assert_eq!(table[[4, 8]], 100);
        assert_eq!(table[[4, 9]], 100);
        assert_eq!(p.shard_sizes(), vec![200; 5]);
        assert!(partition_two_class(&d, 4).is_err());

        let small = make_synthetic_dataset(2, 5, 2, 0.5, 0).unwrap();
        let one = partition_two_class(&small, 1).unwrap();
        assert_eq!(one.client_indices[0].len(), 10);
    }

    #[test]
    fn iid_summary_is_flat() {
        let d = make_synthetic_dataset(10, 100, 4, 0.5, 0).unwrap();
        let p = partition_iid(&d, 5, 9).unwrap();
        let table = heterogeneity_summary(&p, &d);
        let target = 1000.0 / 50.0;
        assert!(table.iter().all(|&x| (x as f64 - target).abs() <= 1.0));
    }

    #[test]
    fn summary_conserves_class_counts() {
        let d = make_synthetic_dataset(6, 20, 3, 0.5, 2).unwrap();
        let p = partition_dirichlet(&d, 4, 0.3, 1, 100).unwrap();
        let table = heterogeneity_summary(&p, &d);
        let col_sums: Vec<usize> = table.columns().into_iter().map(|c| c.sum()).collect();
        assert_eq!(col_sums, d.class_counts());
        let row_sums: Vec<usize> = table.rows().into_iter().map(|r| r.sum()).collect();
        assert_eq!(row_sums, p.shard_sizes());
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn partition_json_schema() {
        let d = make_synthetic_dataset(4, 3, 2, 0.5, 0).unwrap();
        let p = partition_dirichlet(&d, 2, 0.5, 4, 100).unwrap();
        let json: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(json["scenario_tag"], "dirichlet");
        assert_eq!(json["alpha"], 0.5);
        assert_eq!(json["seed"], 4);
        assert!(json["client_indices"].is_array());
        assert_eq!(PartitionSpec::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    /// Monte-Carlo oracle over the Dirichlet sampler alone: mean of the
    /// largest component for tiny alpha, and spread around 1/m for huge alpha.
    #[test]
    fn dirichlet_sampler_oracle() {
        let mut rng = rng::rng_for(123, &[]);
        let draws: Vec<Vec<f64>> = (0..2000).map(|_| sample_dirichlet(&mut rng, 0.01, 5)).collect();
        let mean_max = draws
            .iter()
            .map(|d| d.iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / draws.len() as f64;
        assert!(mean_max > 0.95, "{mean_max}");
        for d in &draws {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let flat: Vec<Vec<f64>> = (0..2000).map(|_| sample_dirichlet(&mut rng, 100.0, 5)).collect();
        let worst = flat
            .iter()
            .flat_map(|d| d.iter().map(|p| (p - 0.2).abs()))
            .fold(0.0, f64::max);
        assert!(worst < 0.1, "{worst}");
    }

    fn max_class_share(table: &Array2<usize>) -> f64 {
        table
            .rows()
            .into_iter()
            .map(|r| *r.iter().max().unwrap() as f64 / r.sum().max(1) as f64)
            .sum::<f64>()
            / table.nrows() as f64
    }

    /// Expected mean per-client max-class share when every class lands
    /// whole on a uniformly chosen client, conditioned on no client being
    /// empty: enumerate all `m^c` assignments.
    fn one_hot_share_oracle(c: u32, m: usize) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for code in 0..(m as u64).pow(c) {
            let mut n = vec![0usize; m];
            let mut rest = code;
            for _ in 0..c {
                n[(rest % m as u64) as usize] += 1;
                rest /= m as u64;
            }
            if n.contains(&0) {
                continue;
            }
            total += n.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / m as f64;
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn dirichlet_skew_extremes() {
        let d = make_synthetic_dataset(10, 100, 4, 0.5, 0).unwrap();
        let mut client_share = 0.0;
        let mut class_share = 0.0;
        for seed in 0..20 {
            let p = partition_dirichlet(&d, 5, 0.01, seed, 100).unwrap();
            let table = heterogeneity_summary(&p, &d);
            client_share += max_class_share(&table);
            class_share += max_class_share(&table.t().to_owned());

            let p = partition_dirichlet(&d, 5, 100.0, seed, 100).unwrap();
            let table = heterogeneity_summary(&p, &d);
            // Each client's share of each class stays near 1/m.
            for j in 0..10 {
                let col_total: usize = table.column(j).sum();
                for k in 0..5 {
                    let share = table[[k, j]] as f64 / col_total as f64;
                    assert!((share - 0.2).abs() < 0.1, "seed {seed} client {k} class {j}: {share}");
                }
            }
        }
        // Nearly every class goes to a single client...
        assert!(class_share / 20.0 > 0.95, "{}", class_share / 20.0);
        // ...so a client's dominant class share is 1/(classes it holds).
        let oracle = one_hot_share_oracle(10, 5);
        assert!((client_share / 20.0 - oracle).abs() < 0.08, "{} vs {oracle}", client_share / 20.0);
    }

    #[test]
    fn label_entropy_grows_with_alpha() {
        let d = make_synthetic_dataset(10, 100, 4, 0.5, 0).unwrap();
        let entropies: Vec<f64> = [0.01, 0.1, 0.5, 100.0]
            .iter()
            .map(|&alpha| {
                (0..20)
                    .map(|seed| {
                        let p = partition_dirichlet(&d, 5, alpha, seed, 100).unwrap();
                        mean_label_entropy(&heterogeneity_summary(&p, &d))
                    })
                    .sum::<f64>()
                    / 20.0
            })
            .collect();
        assert!(entropies.windows(2).all(|w| w[0] <= w[1]), "{entropies:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn dirichlet_partitions_are_valid_and_deterministic(
            seed in 0u64..10_000,
            m in 1usize..8,
            alpha in prop::sample::select(vec![0.05, 0.3, 1.0, 10.0]),
        ) {
            let d = make_synthetic_dataset(5, 20, 2, 0.5, 1).unwrap();
            let p = partition_dirichlet(&d, m, alpha, seed, 100).unwrap();
            prop_assert!(p.validate(d.len()).is_ok());
            prop_assert_eq!(p.shard_sizes().iter().sum::<usize>(), d.len());
            prop_assert_eq!(&p, &partition_dirichlet(&d, m, alpha, seed, 100).unwrap());
        }
    }
}
