//! Model stratification: probe how well each client model can steer a fresh
//! generator towards each class, and turn those scores into the two
//! normalised weight matrices used by stratified aggregation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{
    build_generator_with, generator_input, loss, DiffModel, GeneratorSpec, Graph, Mode, Optimizer,
    OptimizerKind,
};
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-iteration cross-entropy of one (client, class) guidance probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub client_id: usize,
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// Raw capability matrix `U` (classes × clients) and its row- and
/// column-normalised forms.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityMatrices {
    pub u: Array2<f64>,
    /// Each row sums to one over clients.
    pub u_row: Array2<f64>,
    /// Each column sums to one over classes.
    pub u_col: Array2<f64>,
    pub epsilon: f64,
    /// Rows of `U` that were all zero and fell back to uniform weights.
    pub degenerate_rows: Vec<usize>,
    /// Columns of `U` that were all zero and fell back to uniform weights.
    pub degenerate_cols: Vec<usize>,
}

impl CapabilityMatrices {
    /// Normalise a raw `c × m` capability matrix.
    pub fn from_raw(u: Array2<f64>, epsilon: f64) -> Result<Self> {
        let (c, m) = u.dim();
        if c == 0 || m == 0 {
            return Err(Error::invalid("capability matrix must be non-empty"));
        }
        if u.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("capability entries must be finite and non-negative"));
        }
        let mut u_row = u.clone();
        let mut degenerate_rows = Vec::new();
        for (j, mut row) in u_row.rows_mut().into_iter().enumerate() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            } else {
                log::warn!("no client guided class {j}; using uniform client weights");
                row.fill(1.0 / m as f64);
                degenerate_rows.push(j);
            }
        }
        let mut u_col = u.clone();
        let mut degenerate_cols = Vec::new();
        for (k, mut col) in u_col.columns_mut().into_iter().enumerate() {
            let s = col.sum();
            if s > 0.0 {
                col /= s;
            } else {
                log::warn!("client {k} guided no class; using uniform class weights");
                col.fill(1.0 / c as f64);
                degenerate_cols.push(k);
            }
        }
        Ok(Self {
            u,
            u_row,
            u_col,
            epsilon,
            degenerate_rows,
            degenerate_cols,
        })
    }

    /// All-ones capabilities: `U_row = 1/m`, `U_col = 1/c`.
    pub fn uniform(c: usize, m: usize) -> Self {
        Self::from_raw(Array2::ones((c, m)), DEFAULT_EPSILON).expect("non-empty")
    }

    pub fn n_classes(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_clients(&self) -> usize {
        self.u.ncols()
    }

    /// Write `U`, `U_row` and `U_col` as `caps_U.csv`, `caps_Ur.csv` and
    /// `caps_Uc.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in [("caps_U.csv", &self.u), ("caps_Ur.csv", &self.u_row), ("caps_Uc.csv", &self.u_col)] {
            std::fs::write(dir.join(name), matrix_csv(m))?;
        }
        Ok(())
    }
}

/// `c` rows by `m` columns under a `client_0,...,client_{m-1}` header.
pub fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = (0..m.ncols())
        .map(|k| format!("client_{k}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in m.rows() {
        let line = row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty matrix csv"))?;
    let cols = header.split(',').count();
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        let parsed = parsed.map_err(|e| Error::invalid(format!("bad matrix csv value: {e}")))?;
        if parsed.len() != cols {
            return Err(Error::shape(format!("csv row {rows} has {} fields, header {cols}", parsed.len())));
        }
        values.extend(parsed);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::shape(e.to_string()))
}

/// Generator probe settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifyConfig {
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub conditional: bool,
    /// Generator iterations per probe (`T_G`).
    pub steps: usize,
    /// Generator learning rate (`η_G`).
    pub lr: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
    /// Run the `m·c` probes on the rayon pool.
    pub parallel: bool,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        Self {
            noise_dim: 16,
            generator_hidden: 64,
            conditional: true,
            steps: 30,
            lr: 1e-3,
            batch_size: 64,
            epsilon: DEFAULT_EPSILON,
            optimizer: OptimizerKind::Adam,
            parallel: true,
        }
    }
}

impl StratifyConfig {
    fn generator_spec(&self, client: &DiffModel) -> GeneratorSpec {
        GeneratorSpec {
            noise_dim: self.noise_dim,
            n_classes: client.n_outputs(),
            output_dim: client.input_dim(),
            hidden: self.generator_hidden,
            conditional: self.conditional,
        }
    }
}

/// Train a fresh generator for `cfg.steps` iterations to make `client`
/// predict `class_j` on one fixed noise batch, recording the loss before
/// every update. The client model is only read.
pub fn guidance_loss_trace(
    client: &DiffModel,
    client_id: usize,
    class_j: usize,
    gen_seed: u64,
    cfg: &StratifyConfig,
) -> Result<LossTrace> {
    let c = client.n_outputs();
    if class_j >= c {
        return Err(Error::LabelOutOfRange {
            label: class_j,
            n_classes: c,
        });
    }
    if cfg.steps < 2 {
        return Err(Error::invalid(format!("guidance probe needs at least 2 steps, got {}", cfg.steps)));
    }
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    let mut generator = build_generator_with(&cfg.generator_spec(client), gen_seed)?;
    let mut rng = rng::rng_for(gen_seed, &[rng::tag("probe-noise")]);
    let noise = Array2::from_shape_fn((cfg.batch_size, cfg.noise_dim), |_| StandardNormal.sample(&mut rng));
    let labels = vec![class_j; cfg.batch_size];
    let input = generator_input(&noise, &labels, &generator)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, generator.n_params());

    let mut values = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let z = g.constant(input.clone());
        let gen = generator.forward(&mut g, z, Mode::Train, true)?;
        let teacher = client.forward(&mut g, gen.output, Mode::Eval, false)?;
        let l = loss::cross_entropy(&mut g, teacher.output, &labels);
        let value = g.scalar(l);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("guidance probe (client {client_id}, class {class_j})"),
                step,
                value,
            });
        }
        values.push(value);
        let grads = g.backward(l);
        let grad = generator.flat_grad(&grads, &gen);
        opt.step(generator.params_mut(), &grad);
        generator.commit_batch_stats(&g, &gen);
    }
    Ok(LossTrace {
        client_id,
        class_id: class_j,
        values,
    })
}

/// Range of the trace over its minimum: `(max L − min L) / (min L + ε)`.
pub fn guidance_capability(trace: &LossTrace, epsilon: f64) -> f64 {
    let max = trace.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = trace.values.iter().copied().fold(f64::INFINITY, f64::min);
    (max - min) / (min + epsilon)
}

/// Capability matrices for `clients`, with client `k` keyed by position.
pub fn model_stratification(clients: &[DiffModel], cfg: &StratifyConfig, seed: u64) -> Result<CapabilityMatrices> {
    let keys: Vec<u64> = (0..clients.len() as u64).collect();
    model_stratification_keyed(clients, &keys, cfg, seed)
}

/// Like [`model_stratification`], but the probe generator for cell
/// `(k, j)` is seeded from `(seed, keys[k], j)`, so reordering clients
/// together with their keys permutes the output columns and nothing else.
pub fn model_stratification_keyed(
    clients: &[DiffModel],
    keys: &[u64],
    cfg: &StratifyConfig,
    seed: u64,
) -> Result<CapabilityMatrices> {
    let first = clients.first().ok_or_else(|| Error::invalid("no client models"))?;
    if keys.len() != clients.len() {
        return Err(Error::invalid("one key per client model required"));
    }
    let c = first.n_outputs();
    if let Some(bad) = clients.iter().find(|m| m.n_outputs() != c) {
        return Err(Error::shape(format!(
            "client `{}` emits {} logits, expected {c}",
            bad.architecture_tag(),
            bad.n_outputs()
        )));
    }
    let m = clients.len();
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|k| (0..c).map(move |j| (k, j))).collect();
    let probe = |&(k, j): &(usize, usize)| -> Result<f64> {
        let gen_seed = rng::derive_seed(seed, &[rng::tag("ms"), keys[k], j as u64]);
        let trace = guidance_loss_trace(&clients[k], k, j, gen_seed, cfg)?;
        Ok(guidance_capability(&trace, cfg.epsilon))
    };
    let scores: Vec<f64> = if cfg.parallel {
        cells.par_iter().map(probe).collect::<Result<_>>()?
    } else {
        cells.iter().map(probe).collect::<Result<_>>()?
    };
    let mut u = Array2::zeros((c, m));
    for (&(k, j), s) in cells.iter().zip(scores) {
        u[[j, k]] = s;
    }
    CapabilityMatrices::from_raw(u, cfg.epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    use crate::nnkit::build_classifier;

    fn quick() -> StratifyConfig {
        StratifyConfig {
            steps: 5,
            batch_size: 8,
            noise_dim: 4,
            generator_hidden: 8,
            ..StratifyConfig::default()
        }
    }

    #[test]
    fn capability_formula() {
        let t = |v: Vec<f64>| LossTrace {
            client_id: 0,
            class_id: 0,
            values: v,
        };
        assert_eq!(guidance_capability(&t(vec![5.0, 5.0, 5.0]), 0.1), 0.0);
        let u = guidance_capability(&t(vec![4.0, 1.0, 2.0]), 1e-8);
        assert!((u - 3.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((u - (3.0 - 3e-8)).abs() < 1e-14);
        let blow_up = guidance_capability(&t(vec![2.0, 0.0, 1.0]), 1e-8);
        assert!((blow_up - 2e8).abs() < 1e-3 && blow_up.is_finite());
    }

    #[test]
    fn normalisation_example() {
        let caps = CapabilityMatrices::from_raw(array![[1.0, 3.0], [2.0, 2.0]], 1e-8).unwrap();
        assert_eq!(caps.u_row, array![[0.25, 0.75], [0.5, 0.5]]);
        let expect = array![[1.0 / 3.0, 0.6], [2.0 / 3.0, 0.4]];
        for (a, b) in caps.u_col.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = CapabilityMatrices::from_raw(array![[0.3], [2.0], [0.1]], 1e-8).unwrap();
        assert!(single.u_row.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_rows_fall_back_to_uniform() {
        let caps = CapabilityMatrices::from_raw(array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]], 1e-8).unwrap();
        assert_eq!(caps.degenerate_rows, vec![0]);
        assert!(caps.u_row.row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(caps.degenerate_cols, Vec::<usize>::new());
        assert!(CapabilityMatrices::from_raw(array![[-1.0]], 1e-8).is_err());
    }

    #[test]
    fn csv_layout() {
        let caps = CapabilityMatrices::from_raw(array![[1.0, 3.0], [2.0, 2.0]], 1e-8).unwrap();
        let text = matrix_csv(&caps.u_row);
        assert_eq!(text, "client_0,client_1\n0.25,0.75\n0.5,0.5\n");
        assert_eq!(parse_matrix_csv(&text).unwrap(), caps.u_row);
    }

    #[test]
    fn uniform_logits_trace_is_log_c() {
        let mut client = build_classifier("mlp_small", 4, 5, 0).unwrap();
        let slots: Vec<_> = client.manifest().iter().rev().take(2).cloned().collect();
        for s in slots {
            client.params_mut()[s.offset..s.offset + s.len()].fill(0.0);
        }
        let trace = guidance_loss_trace(&client, 0, 2, 1, &quick()).unwrap();
        assert_eq!(trace.values.len(), 5);
        for v in trace.values {
            assert!((v - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_validates_arguments() {
        let client = build_classifier("mlp_small", 4, 3, 0).unwrap();
        assert!(guidance_loss_trace(&client, 0, 3, 0, &quick()).is_err());
        let short = StratifyConfig { steps: 1, ..quick() };
        assert!(guidance_loss_trace(&client, 0, 0, 0, &short).is_err());
    }

    #[test]
    fn stratification_leaves_clients_untouched_and_is_equivariant() {
        let clients: Vec<DiffModel> = ["mlp_small", "mlp_wide", "cnn_small"]
            .iter()
            .enumerate()
            .map(|(i, t)| build_classifier(t, 4, 3, i as u64).unwrap())
            .collect();
        let before = clients.clone();
        let cfg = quick();
        let caps = model_stratification(&clients, &cfg, 9).unwrap();
        assert_eq!(clients, before);
        assert_eq!(caps.u.dim(), (3, 3));
        assert!(caps.u.iter().all(|&v| v >= 0.0 && v.is_finite()));

        let perm = [2usize, 0, 1];
        let permuted: Vec<DiffModel> = perm.iter().map(|&i| clients[i].clone()).collect();
        let keys: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
        let p_caps = model_stratification_keyed(&permuted, &keys, &cfg, 9).unwrap();
        for (new_k, &old_k) in perm.iter().enumerate() {
            assert_eq!(p_caps.u.column(new_k), caps.u.column(old_k));
            // Row sums run over clients in a different order.
            for (a, b) in p_caps.u_row.column(new_k).iter().zip(caps.u_row.column(old_k)) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(p_caps.u_col.column(new_k), caps.u_col.column(old_k));
        }

        let serial = StratifyConfig { parallel: false, ..cfg };
        assert_eq!(model_stratification(&clients, &serial, 9).unwrap(), caps);
    }

    proptest! {
        #[test]
        fn normalised_matrices_are_stochastic(
            (c, m, vals) in (1usize..8, 1usize..8).prop_flat_map(|(c, m)| {
                (Just(c), Just(m), prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..100.0], c * m))
            })
        ) {
            let caps = CapabilityMatrices::from_raw(Array2::from_shape_vec((c, m), vals).unwrap(), 1e-8).unwrap();
            for row in caps.u_row.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            for col in caps.u_col.columns() {
                prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}
