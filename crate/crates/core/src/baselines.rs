//! Reference methods: count-weighted parameter averaging and distillation
//! from an unweighted logit ensemble.

use ndarray::Array2;

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result, StageContext};
use crate::hasa::{
    run_distillation, train_round_clients, ClientRound, DistillConfig, DistillOutcome, Ensemble, GenLossWeights,
    PipelineConfig,
};
use crate::nnkit::{BnStats, DiffModel, Mode};

/// Count-weighted mean of parameters and batch-norm running statistics.
pub fn fedavg_aggregate(models: &[DiffModel], counts: &[usize]) -> Result<DiffModel> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to average"))?;
    if counts.len() != models.len() {
        return Err(Error::invalid(format!(
            "{} counts for {} models",
            counts.len(),
            models.len()
        )));
    }
    if let Some(bad) = models.iter().find(|m| !m.same_structure(first)) {
        return Err(Error::ArchitectureMismatch(format!(
            "`{}` cannot be averaged with `{}`",
            bad.architecture_tag(),
            first.architecture_tag()
        )));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("sample counts sum to zero"));
    }
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();

    let mut params = vec![0.0; first.n_params()];
    for (m, &w) in models.iter().zip(&weights) {
        for (acc, &p) in params.iter_mut().zip(m.params()) {
            *acc += w * p;
        }
    }
    let mut running: Vec<BnStats> = first
        .running
        .iter()
        .map(|s| BnStats {
            mean: vec![0.0; s.width()],
            var: vec![0.0; s.width()],
        })
        .collect();
    for (m, &w) in models.iter().zip(&weights) {
        for (acc, s) in running.iter_mut().zip(&m.running) {
            for (a, v) in acc.mean.iter_mut().zip(&s.mean) {
                *a += w * v;
            }
            for (a, v) in acc.var.iter_mut().zip(&s.var) {
                *a += w * v;
            }
        }
    }
    let mut out = first.clone();
    out.set_params(params)?;
    out.set_running(running);
    Ok(out)
}

/// Unweighted mean of the clients' eval-mode logits on `batch`.
pub fn ae_logits(clients: &[DiffModel], batch: &Array2<f64>) -> Result<Array2<f64>> {
    let first = clients.first().ok_or_else(|| Error::invalid("no client models"))?;
    let c = first.n_outputs();
    let mut acc = Array2::<f64>::zeros((batch.nrows(), c));
    for m in clients {
        if m.n_outputs() != c {
            return Err(Error::shape(format!(
                "client `{}` emits {} logits, expected {c}",
                m.architecture_tag(),
                m.n_outputs()
            )));
        }
        acc += &m.forward_logits(batch, Mode::Eval)?;
    }
    Ok(acc / clients.len() as f64)
}

/// The distillation loop with the averaging ensemble in place of the
/// stratified one.
pub fn dense_distill(
    clients: &[DiffModel],
    cfg: &DistillConfig,
    weights: &GenLossWeights,
    seed: u64,
    test: Option<&LabeledDataset>,
) -> Result<DistillOutcome> {
    run_distillation(clients, Ensemble::Average, cfg, weights, seed, None, test)
}

#[derive(Clone, Debug)]
pub struct FedAvgRound {
    pub round: usize,
    pub clients: ClientRound,
    pub global: DiffModel,
    pub test_top1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FedAvgOutcome {
    pub global: DiffModel,
    pub rounds: Vec<FedAvgRound>,
}

/// Parameter averaging over `rounds` rounds; clients restart from the
/// averaged model each round. `first` optionally supplies precomputed
/// round-0 clients.
pub fn fedavg(
    shards: &[LabeledDataset],
    rounds: usize,
    pipeline: &PipelineConfig,
    seed: u64,
    test: Option<&LabeledDataset>,
    first: Option<ClientRound>,
) -> Result<FedAvgOutcome> {
    if rounds == 0 {
        return Err(Error::invalid("at least one round is required"));
    }
    let counts: Vec<usize> = shards.iter().map(LabeledDataset::len).collect();
    let mut first = first;
    let mut global: Option<DiffModel> = None;
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let clients = match first.take() {
            Some(pre) if round == 0 => pre,
            _ => train_round_clients(shards, pipeline, global.as_ref(), round, seed).stage("local training")?,
        };
        let avg = fedavg_aggregate(&clients.models, &counts).stage("parameter averaging")?;
        let test_top1 = test.map(|t| crate::experiment::evaluate_top1(&avg, t)).transpose()?;
        global = Some(avg.clone());
        out.push(FedAvgRound {
            round,
            clients,
            global: avg,
            test_top1,
        });
    }
    Ok(FedAvgOutcome {
        global: global.expect("at least one round"),
        rounds: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    use crate::nnkit::build_classifier;
    use crate::sagg::{stratified_aggregate, LogitBatch};
    use crate::stratify::CapabilityMatrices;

    fn with_params(base: &DiffModel, f: impl Fn(usize) -> f64) -> DiffModel {
        let mut m = base.clone();
        let p = (0..m.n_params()).map(f).collect();
        m.set_params(p).unwrap();
        m
    }

    #[test]
    fn weighted_means() {
        let base = build_classifier("mlp_small", 3, 2, 0).unwrap();
        let a = with_params(&base, |_| 1.0);
        let b = with_params(&base, |_| 3.0);
        let avg = fedavg_aggregate(&[a.clone(), b.clone()], &[5, 5]).unwrap();
        assert!(avg.params().iter().all(|&p| p == 2.0));
        let zero = with_params(&base, |_| 0.0);
        let four = with_params(&base, |_| 4.0);
        let avg = fedavg_aggregate(&[zero, four], &[1, 3]).unwrap();
        assert!(avg.params().iter().all(|&p| p == 3.0));
        assert_eq!(fedavg_aggregate(&[a.clone(), a.clone()], &[2, 7]).unwrap(), a);
    }

    #[test]
    fn running_stats_are_averaged() {
        let mut a = build_classifier("mlp_small", 3, 2, 0).unwrap();
        let mut b = a.clone();
        let w = a.running[0].width();
        a.set_running(vec![BnStats {
            mean: vec![1.0; w],
            var: vec![2.0; w],
        }]);
        b.set_running(vec![BnStats {
            mean: vec![3.0; w],
            var: vec![6.0; w],
        }]);
        let avg = fedavg_aggregate(&[a, b], &[1, 1]).unwrap();
        let s = avg.bn_running_stats().unwrap();
        assert!(s.layers[0].mean.iter().all(|&v| v == 2.0));
        assert!(s.layers[0].var.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn heterogeneous_models_are_rejected() {
        let a = build_classifier("mlp_small", 3, 2, 0).unwrap();
        let b = build_classifier("mlp_wide", 3, 2, 0).unwrap();
        assert!(matches!(
            fedavg_aggregate(&[a.clone(), b], &[1, 1]),
            Err(Error::ArchitectureMismatch(_))
        ));
        assert!(fedavg_aggregate(&[a.clone()], &[0]).is_err());
        assert!(fedavg_aggregate(&[a], &[1, 2]).is_err());
    }

    #[test]
    fn ae_examples() {
        let m = build_classifier("mlp_wide", 3, 4, 1).unwrap();
        let x = array![[0.1, -0.5, 2.0], [1.0, 0.0, -1.0]];
        assert_eq!(ae_logits(&[m.clone()], &x).unwrap(), m.forward_logits(&x, Mode::Eval).unwrap());

        let other = build_classifier("cnn_small", 3, 4, 2).unwrap();
        let pair = [m.clone(), other.clone()];
        let ae = ae_logits(&pair, &x).unwrap();
        let expected = (m.forward_logits(&x, Mode::Eval).unwrap() + other.forward_logits(&x, Mode::Eval).unwrap()) / 2.0;
        assert!((&ae - &expected).iter().all(|d| d.abs() < 1e-12));

        // Uniform stratification is the averaging ensemble scaled by 1/c.
        let labels = vec![0, 3];
        let batches: Vec<_> = pair
            .iter()
            .map(|c| LogitBatch::new(c.forward_logits(&x, Mode::Eval).unwrap(), labels.clone()).unwrap())
            .collect();
        let sa = stratified_aggregate(&batches, &CapabilityMatrices::uniform(4, 2)).unwrap();
        assert!((&sa * 4.0 - &ae).iter().all(|d| d.abs() < 1e-12));

        let bad = build_classifier("mlp_small", 3, 2, 0).unwrap();
        assert!(ae_logits(&[m, bad], &x).is_err());
    }

    #[test]
    fn mean_of_two_logit_rows() {
        // P_1 = [[2, 4]], P_2 = [[1, 1]] through single-linear "models".
        let make = |w: [f64; 2]| {
            let mut m = DiffModel::assemble(
                "probe".into(),
                crate::nnkit::ModelKind::Classifier,
                1,
                vec![crate::nnkit::Layer::Linear { inputs: 1, outputs: 2 }],
                0,
            );
            m.set_params(vec![w[0], w[1], 0.0, 0.0]).unwrap();
            m
        };
        let out = ae_logits(&[make([2.0, 4.0]), make([1.0, 1.0])], &array![[1.0]]).unwrap();
        assert_eq!(out, array![[1.5, 2.5]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fedavg_is_permutation_invariant(
            vals in proptest::collection::vec((-3.0f64..3.0, 1usize..50), 2..5),
            shift in 0usize..4,
        ) {
            let base = build_classifier("mlp_small", 3, 2, 0).unwrap();
            let models: Vec<_> = vals
                .iter()
                .map(|&(v, _)| with_params(&base, |i| v + i as f64 * 1e-3))
                .collect();
            let counts: Vec<_> = vals.iter().map(|&(_, n)| n).collect();
            let a = fedavg_aggregate(&models, &counts).unwrap();
            let k = shift % models.len();
            let mut rm = models.clone();
            let mut rc = counts.clone();
            rm.rotate_left(k);
            rc.rotate_left(k);
            rm.reverse();
            rc.reverse();
            let b = fedavg_aggregate(&rm, &rc).unwrap();
            for (x, y) in a.params().iter().zip(b.params()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ae_is_linear_and_order_free(scale in -2.0f64..2.0, seeds in proptest::collection::vec(0u64..100, 2..4)) {
            let x = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4], [-0.7, 0.9, 1.1]];
            let models: Vec<_> = seeds.iter().map(|&s| build_classifier("mlp_small", 3, 3, s).unwrap()).collect();
            let ae = ae_logits(&models, &x).unwrap();
            let mut rev = models.clone();
            rev.reverse();
            let ae_rev = ae_logits(&rev, &x).unwrap();
            prop_assert!((&ae - &ae_rev).iter().all(|d| d.abs() < 1e-12));

            // Scaling the output layer scales every client's logits.
            let scaled: Vec<_> = models
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    let last = m.manifest().len();
                    let (w, b) = (m.manifest()[last - 2].clone(), m.manifest()[last - 1].clone());
                    for i in w.offset..b.offset + b.len() {
                        m.params_mut()[i] *= scale;
                    }
                    m
                })
                .collect();
            let ae_scaled = ae_logits(&scaled, &x).unwrap();
            prop_assert!((&ae_scaled - &(ae * scale)).iter().all(|d| d.abs() < 1e-10));
        }
    }

    #[test]
    fn fedavg_rounds_and_dense_trace() {
        use crate::datagen::make_synthetic_dataset;
        use crate::hasa::DistillMethod;
        let data = make_synthetic_dataset(3, 12, 4, 0.3, 1).unwrap();
        let shards: Vec<_> = (0..3)
            .map(|k| data.subset(&(0..data.len()).filter(|i| i % 3 == k).collect::<Vec<_>>()).unwrap())
            .collect();
        let mut pipe = PipelineConfig::default();
        pipe.local.epochs = 2;
        pipe.local.batch_size = 8;
        pipe.distill.global_epochs = 2;
        pipe.distill.generator_steps = 1;
        pipe.distill.batch_size = 6;
        let out = fedavg(&shards, 2, &pipe, 0, Some(&data), None).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert!(out.rounds.iter().all(|r| r.test_top1.is_some()));

        let dense = dense_distill(&out.rounds[0].clients.models, &pipe.distill, &pipe.weights, 0, Some(&data)).unwrap();
        assert_eq!(dense.epochs.len(), 2);
        let mr = crate::hasa::multi_round(&shards, 1, &pipe, DistillMethod::Dense, 0, None, None).unwrap();
        assert_eq!(mr.rounds[0].clients.models, out.rounds[0].clients.models);
    }
}
