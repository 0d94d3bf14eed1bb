//! Experiment orchestration: data, partitions, method runs, metric rows,
//! persisted results and plots.

mod config;
mod plot;
mod report;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Method};
pub use plot::{plot_curves, plot_run_dir, plot_summary};
pub use report::{emit_results, read_metrics_csv, write_metrics_csv, MetricRow, METRICS_HEADER};

use crate::baselines;
use crate::datagen::{
    make_synthetic_dataset, partition_dirichlet, partition_iid, partition_two_class, LabeledDataset, PartitionSpec,
    Scenario,
};
use crate::error::{Error, Result, StageContext};
use crate::hasa::{self, ClientRound, DistillMethod, PipelineConfig};
use crate::nnkit::{DiffModel, Mode};
use crate::rng;
use crate::sagg::hard_labels;
use crate::stratify::{model_stratification, CapabilityMatrices};

/// Fraction of `test` whose eval-mode argmax matches the label.
pub fn evaluate_top1(model: &DiffModel, test: &LabeledDataset) -> Result<f64> {
    if model.n_outputs() != test.n_classes() || model.input_dim() != test.feature_dim() {
        return Err(Error::shape(format!(
            "model maps {}→{}, test set has {} features and {} classes",
            model.input_dim(),
            model.n_outputs(),
            test.feature_dim(),
            test.n_classes()
        )));
    }
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let predicted = hard_labels(&model.forward_logits(test.features(), Mode::Eval)?);
    let correct = predicted.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Training data, held-out test data and client shards for one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: PartitionSpec,
    pub shards: Vec<LabeledDataset>,
}

/// Draw the training set, an independent test set from the same class
/// means, and the client partition.
pub fn build_seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let train = make_synthetic_dataset(
        cfg.classes,
        cfg.n_per_class,
        cfg.feature_dim,
        cfg.spread,
        rng::derive_seed(seed, &[rng::tag("train")]),
    )?;
    let test = make_synthetic_dataset(
        cfg.classes,
        cfg.test_per_class(),
        cfg.feature_dim,
        cfg.spread,
        rng::derive_seed(seed, &[rng::tag("test")]),
    )?;
    let part_seed = rng::derive_seed(seed, &[rng::tag("partition")]);
    let partition = match cfg.scenario {
        Scenario::Dirichlet => partition_dirichlet(&train, cfg.clients, cfg.alpha, part_seed, cfg.max_retries)?,
        Scenario::TwoClass => partition_two_class(&train, cfg.clients)?,
        Scenario::Iid => partition_iid(&train, cfg.clients, part_seed)?,
    };
    let shards = partition.shards(&train)?;
    Ok(SeedData {
        seed,
        train,
        test,
        partition,
        shards,
    })
}

/// Train the round-0 clients for `seed` and stratify them.
pub fn stratify_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(CapabilityMatrices, ClientRound, Duration)> {
    let data = build_seed_data(cfg, seed).stage("data")?;
    let pipeline = cfg.pipeline();
    let clients = hasa::train_round_clients(&data.shards, &pipeline, None, 0, seed).stage("local training")?;
    let started = Instant::now();
    let caps = model_stratification(
        &clients.models,
        &pipeline.stratify,
        rng::derive_seed(seed, &[rng::tag("ms"), 0]),
    )
    .stage("model stratification")?;
    Ok((caps, clients, started.elapsed()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalAccuracy {
    pub method: Method,
    pub seed: u64,
    pub top1: f64,
}

/// Test accuracy after every distillation epoch (or every round, for
/// parameter averaging), concatenated across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub method: Method,
    pub seed: u64,
    pub top1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub seed: u64,
    pub round: usize,
    /// `c × m` row-normalised capability matrix.
    pub u_row: Vec<Vec<f64>>,
}

/// Deterministic summary persisted as `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub config_hash: String,
    pub scenario: Scenario,
    pub alpha: Option<f64>,
    pub clients: usize,
    pub classes: usize,
    pub rounds: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub final_top1: Vec<FinalAccuracy>,
    pub mean_top1: BTreeMap<String, f64>,
    pub curves: Vec<Curve>,
    pub heatmap: Option<Heatmap>,
}

impl ResultSummary {
    pub fn mean(&self, method: Method) -> Option<f64> {
        self.mean_top1.get(method.as_str()).copied()
    }
}

#[derive(Clone, Debug)]
pub struct CapsRecord {
    pub seed: u64,
    pub round: usize,
    pub caps: CapabilityMatrices,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    pub model: DiffModel,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summary: ResultSummary,
    /// Deterministic metric rows.
    pub metrics: Vec<MetricRow>,
    /// Wall-clock seconds per stage, same schema as `metrics`.
    pub timings: Vec<MetricRow>,
    pub caps: Vec<CapsRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub partitions: Vec<(u64, PartitionSpec)>,
}

#[derive(Default)]
struct SeedOutput {
    metrics: Vec<MetricRow>,
    timings: Vec<MetricRow>,
    finals: Vec<FinalAccuracy>,
    curves: Vec<Curve>,
    caps: Vec<CapsRecord>,
    checkpoints: Vec<Checkpoint>,
}

struct Rows<'a> {
    method: Method,
    seed: u64,
    out: &'a mut Vec<MetricRow>,
}

impl Rows<'_> {
    fn push(&mut self, round: usize, epoch: usize, stage: &str, metric: impl Into<String>, value: f64) {
        self.out.push(MetricRow {
            method: self.method.as_str().to_string(),
            seed: self.seed,
            round,
            epoch,
            stage: stage.to_string(),
            metric: metric.into(),
            value,
        });
    }
}

fn local_rows(rows: &mut Rows<'_>, round: usize, clients: &ClientRound, test: &LabeledDataset) -> Result<()> {
    for (k, history) in clients.histories.iter().enumerate() {
        for e in history {
            rows.push(round, e.epoch, "local", format!("client{k}_loss"), e.loss);
            rows.push(round, e.epoch, "local", format!("client{k}_train_acc"), e.train_acc);
        }
    }
    for (k, model) in clients.models.iter().enumerate() {
        let top1 = evaluate_top1(model, test)?;
        rows.push(round, clients.histories[k].len(), "local", format!("client{k}_test_top1"), top1);
    }
    Ok(())
}

fn timing_row(method: Method, seed: u64, round: usize, stage: &str, elapsed: Duration) -> MetricRow {
    MetricRow {
        method: method.as_str().to_string(),
        seed,
        round,
        epoch: 0,
        stage: stage.to_string(),
        metric: "seconds".into(),
        value: elapsed.as_secs_f64(),
    }
}

fn run_distill_method(
    cfg: &ExperimentConfig,
    pipeline: &PipelineConfig,
    data: &SeedData,
    method: Method,
    first: ClientRound,
    out: &mut SeedOutput,
) -> Result<()> {
    let seed = data.seed;
    let which = if method == Method::FedHydra {
        DistillMethod::FedHydra
    } else {
        DistillMethod::Dense
    };
    let run = hasa::multi_round(&data.shards, cfg.rounds, pipeline, which, seed, Some(&data.test), Some(first))?;
    let mut rows = Rows {
        method,
        seed,
        out: &mut out.metrics,
    };
    let mut curve = Vec::new();
    for r in &run.rounds {
        local_rows(&mut rows, r.round, &r.clients, &data.test)?;
        if let Some(caps) = &r.caps {
            let probes = (caps.n_classes() * caps.n_clients()) as f64;
            rows.push(r.round, 0, "stratify", "probes", probes);
            rows.push(r.round, 0, "stratify", "probe_steps", probes * pipeline.stratify.steps as f64);
            rows.push(r.round, 0, "stratify", "degenerate_rows", caps.degenerate_rows.len() as f64);
            out.caps.push(CapsRecord {
                seed,
                round: r.round,
                caps: caps.clone(),
            });
        }
        for e in &r.distill.epochs {
            for (metric, value) in [
                ("gen_loss", e.gen_loss),
                ("ce", e.ce),
                ("bn", e.bn),
                ("ad", e.ad),
                ("distill_kl", e.distill_kl),
                ("distill_ce", e.distill_ce),
            ] {
                rows.push(r.round, e.epoch, "distill", metric, value);
            }
            if let Some(t) = e.test_top1 {
                rows.push(r.round, e.epoch, "distill", "test_top1", t);
                curve.push(t);
            }
        }
        out.timings.push(timing_row(method, seed, r.round, "local", r.clients.elapsed));
        if let Some(s) = r.stratify_elapsed {
            out.timings.push(timing_row(method, seed, r.round, "stratify", s));
        }
        out.timings.push(timing_row(method, seed, r.round, "distill", r.distill_elapsed));
    }
    let top1 = evaluate_top1(&run.global, &data.test)?;
    rows.push(cfg.rounds - 1, 0, "final", "test_top1", top1);
    out.finals.push(FinalAccuracy { method, seed, top1 });
    out.curves.push(Curve { method, seed, top1: curve });
    out.checkpoints.push(Checkpoint {
        method,
        seed,
        model: run.global,
    });
    Ok(())
}

fn run_fedavg(
    cfg: &ExperimentConfig,
    pipeline: &PipelineConfig,
    data: &SeedData,
    first: ClientRound,
    out: &mut SeedOutput,
) -> Result<()> {
    let seed = data.seed;
    let method = Method::FedAvg;
    let run = baselines::fedavg(&data.shards, cfg.rounds, pipeline, seed, Some(&data.test), Some(first))?;
    let mut rows = Rows {
        method,
        seed,
        out: &mut out.metrics,
    };
    let mut curve = Vec::new();
    for r in &run.rounds {
        local_rows(&mut rows, r.round, &r.clients, &data.test)?;
        if let Some(t) = r.test_top1 {
            rows.push(r.round, 0, "aggregate", "test_top1", t);
            curve.push(t);
        }
        out.timings.push(timing_row(method, seed, r.round, "local", r.clients.elapsed));
    }
    let top1 = evaluate_top1(&run.global, &data.test)?;
    rows.push(cfg.rounds - 1, 0, "final", "test_top1", top1);
    out.finals.push(FinalAccuracy { method, seed, top1 });
    out.curves.push(Curve { method, seed, top1: curve });
    out.checkpoints.push(Checkpoint {
        method,
        seed,
        model: run.global,
    });
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedOutput, PartitionSpec)> {
    let data = build_seed_data(cfg, seed).stage("data")?;
    let pipeline = cfg.pipeline();
    let first = hasa::train_round_clients(&data.shards, &pipeline, None, 0, seed).stage("local training")?;
    let mut out = SeedOutput::default();
    for &method in &cfg.methods {
        let result = match method {
            Method::FedAvg => run_fedavg(cfg, &pipeline, &data, first.clone(), &mut out),
            _ => run_distill_method(cfg, &pipeline, &data, method, first.clone(), &mut out),
        };
        result.stage(&format!("{method} (seed {seed})"))?;
    }
    log::info!(
        "seed {seed}: {}",
        out.finals
            .iter()
            .map(|f| format!("{}={:.4}", f.method, f.top1))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok((out, data.partition))
}

/// Run every requested method for every seed. Seeds run in parallel on the
/// current rayon pool; all outputs are ordered by seed, then method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let per_seed: Vec<(SeedOutput, PartitionSpec)> =
        cfg.seeds.par_iter().map(|&seed| run_seed(cfg, seed)).collect::<Result<_>>()?;

    let mut all = SeedOutput::default();
    let mut partitions = Vec::with_capacity(per_seed.len());
    for ((out, partition), &seed) in per_seed.into_iter().zip(&cfg.seeds) {
        all.metrics.extend(out.metrics);
        all.timings.extend(out.timings);
        all.finals.extend(out.finals);
        all.curves.extend(out.curves);
        all.caps.extend(out.caps);
        all.checkpoints.extend(out.checkpoints);
        partitions.push((seed, partition));
    }

    let mut mean_top1 = BTreeMap::new();
    for &method in &cfg.methods {
        let vals: Vec<f64> = all.finals.iter().filter(|f| f.method == method).map(|f| f.top1).collect();
        mean_top1.insert(method.as_str().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let heatmap = all.caps.first().map(|rec| Heatmap {
        seed: rec.seed,
        round: rec.round,
        u_row: rec.caps.u_row.rows().into_iter().map(|r| r.to_vec()).collect(),
    });
    let summary = ResultSummary {
        config_hash: cfg.hash(),
        scenario: cfg.scenario,
        alpha: (cfg.scenario == Scenario::Dirichlet).then_some(cfg.alpha),
        clients: cfg.clients,
        classes: cfg.classes,
        rounds: cfg.rounds,
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        final_top1: all.finals,
        mean_top1,
        curves: all.curves,
        heatmap,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        summary,
        metrics: all.metrics,
        timings: all.timings,
        caps: all.caps,
        checkpoints: all.checkpoints,
        partitions,
    })
}

/// The `(λ_bn, λ_adv)` pairs of the loss-weight ablation.
pub const ABLATION_GRID: [(f64, f64); 6] = [(1.0, 1.0), (0.5, 1.0), (0.0, 1.0), (1.0, 0.5), (1.0, 0.0), (0.0, 0.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda_bn: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    pub top1: f64,
}

/// FedHydra final accuracy for each weight pair and seed. Clients are
/// trained once per seed and shared by every pair.
pub fn run_ablation(cfg: &ExperimentConfig, grid: &[(f64, f64)]) -> Result<Vec<AblationRow>> {
    let mut base = cfg.clone();
    base.methods = vec![Method::FedHydra];
    base.validate()?;
    let per_seed: Vec<Vec<AblationRow>> = base
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = build_seed_data(&base, seed).stage("data")?;
            let pipeline = base.pipeline();
            let first = hasa::train_round_clients(&data.shards, &pipeline, None, 0, seed).stage("local training")?;
            grid.iter()
                .map(|&(lambda_bn, lambda_adv)| {
                    let mut p = pipeline.clone();
                    p.weights = hasa::GenLossWeights::new(lambda_bn, lambda_adv)?;
                    let run = hasa::multi_round(
                        &data.shards,
                        base.rounds,
                        &p,
                        DistillMethod::FedHydra,
                        seed,
                        None,
                        Some(first.clone()),
                    )
                    .stage(&format!("ablation ({lambda_bn}, {lambda_adv}), seed {seed}"))?;
                    Ok(AblationRow {
                        lambda_bn,
                        lambda_adv,
                        seed,
                        top1: evaluate_top1(&run.global, &data.test)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}
