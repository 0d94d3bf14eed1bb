//! Alternating synthetic-data generation and global-model distillation.
//!
//! Each global epoch trains a conditional generator against the client
//! ensemble for `generator_steps` iterations, then takes `distill_steps`
//! gradient steps on the global model using the final synthetic batch.
//! The ensemble is either the stratified aggregate or a plain logit mean,
//! selected by [`Ensemble`], so both methods share every loss code path.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::client::{self, EpochStats, LocalConfig};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result, StageContext};
use crate::nnkit::model::row;
use crate::nnkit::{
    batch_moments, build_classifier, build_generator_with, generator_input, log_softmax_rows, loss,
    DiffModel, Forward, GeneratorSpec, Graph, Mode, Optimizer, OptimizerKind, Var,
};
use crate::rng::{self, LabRng};
use crate::sagg::{hard_labels, stratified_aggregate_graph};
use crate::stratify::{model_stratification, CapabilityMatrices, StratifyConfig};

/// Weights of the BN-alignment and adversarial terms in the generator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLossWeights {
    pub lambda_bn: f64,
    pub lambda_adv: f64,
}

impl Default for GenLossWeights {
    fn default() -> Self {
        Self {
            lambda_bn: 1.0,
            lambda_adv: 1.0,
        }
    }
}

impl GenLossWeights {
    pub fn new(lambda_bn: f64, lambda_adv: f64) -> Result<Self> {
        let w = Self { lambda_bn, lambda_adv };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_bn", self.lambda_bn), ("lambda_adv", self.lambda_adv)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Server-side distillation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the hard-label cross-entropy term.
    pub beta: f64,
    /// Global epochs `T_g`.
    pub global_epochs: usize,
    /// Generator iterations per global epoch `T_G`.
    pub generator_steps: usize,
    pub global_lr: f64,
    pub generator_lr: f64,
    /// Synthetic batch size.
    pub batch_size: usize,
    pub temperature: f64,
    /// Global-model steps per global epoch.
    pub distill_steps: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub conditional: bool,
    pub generator_optimizer: OptimizerKind,
    pub global_optimizer: OptimizerKind,
    pub global_arch: String,
}

impl Default for DistillConfig {
    /// Full-scale values: `T_g = 200`, `T_G = 30`, `η_g = 0.01`,
    /// `η_G = 0.001`, SGD for the global model and Adam for the generator.
    fn default() -> Self {
        Self {
            beta: 1.0,
            global_epochs: 200,
            generator_steps: 30,
            global_lr: 0.01,
            generator_lr: 1e-3,
            batch_size: 128,
            temperature: 1.0,
            distill_steps: 1,
            noise_dim: 16,
            generator_hidden: 64,
            conditional: true,
            generator_optimizer: OptimizerKind::Adam,
            global_optimizer: OptimizerKind::Sgd,
            global_arch: "mlp_small".into(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_epochs == 0 || self.generator_steps == 0 || self.distill_steps == 0 {
            return Err(Error::invalid("epoch and step counts must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.noise_dim == 0 || self.generator_hidden == 0 {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        for (name, v) in [
            ("global_lr", self.global_lr),
            ("generator_lr", self.generator_lr),
            ("temperature", self.temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    fn generator_spec(&self, feature_dim: usize, c: usize) -> GeneratorSpec {
        GeneratorSpec {
            noise_dim: self.noise_dim,
            n_classes: c,
            output_dim: feature_dim,
            hidden: self.generator_hidden,
            conditional: self.conditional,
        }
    }
}

/// How client logits are combined into the teacher logits `P`.
#[derive(Clone, Copy, Debug)]
pub enum Ensemble<'a> {
    Stratified(&'a CapabilityMatrices),
    /// Unweighted mean of client logits.
    Average,
}

impl Ensemble<'_> {
    fn check(&self, m: usize, c: usize) -> Result<()> {
        if let Ensemble::Stratified(caps) = self {
            if caps.n_clients() != m || caps.n_classes() != c {
                return Err(Error::shape(format!(
                    "capability matrices are {}×{}, clients give {c}×{m}",
                    caps.n_classes(),
                    caps.n_clients()
                )));
            }
        }
        Ok(())
    }

    fn combine(&self, g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
        match self {
            Ensemble::Stratified(caps) => stratified_aggregate_graph(g, logits, labels, caps),
            Ensemble::Average => {
                let (&first, rest) = logits
                    .split_first()
                    .ok_or_else(|| Error::invalid("no client logits to average"))?;
                let mut acc = first;
                for &v in rest {
                    acc = g.add(acc, v);
                }
                Ok(g.scale(acc, 1.0 / logits.len() as f64))
            }
        }
    }
}

fn check_clients(clients: &[DiffModel]) -> Result<(usize, usize)> {
    let first = clients.first().ok_or_else(|| Error::invalid("no client models"))?;
    let (d, c) = (first.input_dim(), first.n_outputs());
    for m in clients {
        if m.input_dim() != d || m.n_outputs() != c {
            return Err(Error::shape(format!(
                "client `{}` maps {}→{}, expected {d}→{c}",
                m.architecture_tag(),
                m.input_dim(),
                m.n_outputs()
            )));
        }
    }
    Ok((d, c))
}

fn check_labels(labels: &[usize], rows: usize, c: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{rows} rows but {} labels", labels.len())));
    }
    match labels.iter().find(|&&y| y >= c) {
        Some(&label) => Err(Error::LabelOutOfRange { label, n_classes: c }),
        None => Ok(()),
    }
}

fn finite(value: f64, context: impl Into<String>, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            context: context.into(),
            step,
            value,
        })
    }
}

/// Mean cross-entropy of `softmax(p)` against `y`.
pub fn gen_ce_loss(p: &Array2<f64>, y: &[usize]) -> Result<f64> {
    check_labels(y, p.nrows(), p.ncols())?;
    let ls = log_softmax_rows(p);
    Ok(-y.iter().enumerate().map(|(i, &t)| ls[[i, t]]).sum::<f64>() / y.len().max(1) as f64)
}

/// Mean over clients of the summed L2 distances between each BN layer's
/// batch statistics on `synth` and the client's running statistics.
pub fn bn_loss(synth: &Array2<f64>, clients: &[DiffModel]) -> Result<f64> {
    check_clients(clients)?;
    if synth.nrows() < 2 {
        return Err(Error::BatchTooSmall(synth.nrows()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for client in clients {
        let batch = client.bn_batch_stats(synth)?;
        let running = client.bn_running_stats()?;
        for (b, r) in batch.layers.iter().zip(&running.layers) {
            total += dist(&b.mean, &r.mean) + dist(&b.var, &r.var);
        }
    }
    Ok(total / clients.len() as f64)
}

/// Mean over rows of `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_rows(teacher: &Array2<f64>, student: &Array2<f64>, temperature: f64) -> Result<f64> {
    if teacher.dim() != student.dim() {
        return Err(Error::shape(format!(
            "teacher {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let lp = log_softmax_rows(&teacher.mapv(|v| v / temperature));
    let lq = log_softmax_rows(&student.mapv(|v| v / temperature));
    let total: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    Ok(total / teacher.nrows().max(1) as f64)
}

/// Negative teacher/student KL; never positive.
pub fn ad_loss(p: &Array2<f64>, global_logits: &Array2<f64>, temperature: f64) -> Result<f64> {
    Ok(-kl_rows(p, global_logits, temperature)?)
}

/// Components of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub bn: f64,
    pub ad: f64,
}

/// Components of the distillation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillBreakdown {
    pub total: f64,
    pub kl: f64,
    pub ce: f64,
}

struct GenNodes {
    total: Var,
    ce: Var,
    bn: Var,
    ad: Var,
    p: Var,
}

impl GenNodes {
    fn breakdown(&self, g: &Graph) -> GenLossBreakdown {
        GenLossBreakdown {
            total: g.scalar(self.total),
            ce: g.scalar(self.ce),
            bn: g.scalar(self.bn),
            ad: g.scalar(self.ad),
        }
    }
}

/// Generator objective on the graph, with `x` the synthetic batch node.
/// Clients and the global model enter as constants in eval mode.
#[allow(clippy::too_many_arguments)]
fn gen_nodes(
    g: &mut Graph,
    x: Var,
    y: &[usize],
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    global: &DiffModel,
    weights: &GenLossWeights,
    temperature: f64,
) -> Result<GenNodes> {
    let (_, c) = check_clients(clients)?;
    ensemble.check(clients.len(), c)?;
    let rows = g.value(x).nrows();
    if rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    check_labels(y, rows, c)?;

    let mut logits = Vec::with_capacity(clients.len());
    let mut bn_acc: Option<Var> = None;
    for client in clients {
        let fwd = client.forward(g, x, Mode::Eval, false)?;
        let running = client.bn_running_stats()?;
        for (&h, stats) in fwd.bn_inputs.iter().zip(&running.layers) {
            let (mu, var) = batch_moments(g, h);
            let rm = g.constant(row(stats.mean.iter().copied()));
            let rv = g.constant(row(stats.var.iter().copied()));
            let dm = g.sub(mu, rm);
            let dv = g.sub(var, rv);
            let nm = g.norm2(dm);
            let nv = g.norm2(dv);
            let term = g.add(nm, nv);
            bn_acc = Some(match bn_acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        logits.push(fwd.output);
    }
    let bn_sum = bn_acc.expect("clients carry BN layers");
    let bn = g.scale(bn_sum, 1.0 / clients.len() as f64);
    let p = ensemble.combine(g, &logits, y)?;
    let ce = loss::cross_entropy(g, p, y);
    let student = global.forward(g, x, Mode::Eval, false)?;
    if g.value(student.output).ncols() != c {
        return Err(Error::shape(format!(
            "global model emits {} logits for {c} classes",
            global.n_outputs()
        )));
    }
    let kl = loss::kl_divergence(g, p, student.output, temperature);
    let ad = g.scale(kl, -1.0);
    let wbn = g.scale(bn, weights.lambda_bn);
    let wad = g.scale(ad, weights.lambda_adv);
    let partial = g.add(ce, wbn);
    let total = g.add(partial, wad);
    Ok(GenNodes { total, ce, bn, ad, p })
}

/// Generator objective `CE(P, y) + λ_bn·BN + λ_adv·AD` on a synthetic batch.
pub fn gen_total_loss(
    synth: &Array2<f64>,
    y: &[usize],
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    global: &DiffModel,
    weights: &GenLossWeights,
    temperature: f64,
) -> Result<GenLossBreakdown> {
    let mut g = Graph::new();
    let x = g.constant(synth.clone());
    let nodes = gen_nodes(&mut g, x, y, clients, ensemble, global, weights, temperature)?;
    Ok(nodes.breakdown(&g))
}

struct GenPass {
    graph: Graph,
    fwd: Forward,
    nodes: GenNodes,
}

#[allow(clippy::too_many_arguments)]
fn gen_pass(
    generator: &DiffModel,
    input: &Array2<f64>,
    y: &[usize],
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    global: &DiffModel,
    weights: &GenLossWeights,
    temperature: f64,
) -> Result<GenPass> {
    let mut g = Graph::new();
    let z = g.constant(input.clone());
    let fwd = generator.forward(&mut g, z, Mode::Train, true)?;
    let nodes = gen_nodes(&mut g, fwd.output, y, clients, ensemble, global, weights, temperature)?;
    Ok(GenPass { graph: g, fwd, nodes })
}

/// Generator objective for noise `noise` and labels `y`, with its gradient
/// w.r.t. the generator's flat parameters (generator in train mode).
#[allow(clippy::too_many_arguments)]
pub fn gen_total_loss_grad(
    generator: &DiffModel,
    noise: &Array2<f64>,
    y: &[usize],
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    global: &DiffModel,
    weights: &GenLossWeights,
    temperature: f64,
) -> Result<(GenLossBreakdown, Vec<f64>)> {
    let input = generator_input(noise, y, generator)?;
    let pass = gen_pass(generator, &input, y, clients, ensemble, global, weights, temperature)?;
    let grads = pass.graph.backward(pass.nodes.total);
    Ok((pass.nodes.breakdown(&pass.graph), generator.flat_grad(&grads, &pass.fwd)))
}

/// Distillation objective from raw logits:
/// `KL(softmax(P/τ) ‖ softmax(S/τ)) + β·CE(S, argmax P)`.
pub fn distill_loss_logits(
    p: &Array2<f64>,
    global_logits: &Array2<f64>,
    beta: f64,
    temperature: f64,
) -> Result<DistillBreakdown> {
    let kl = kl_rows(p, global_logits, temperature)?;
    let ce = gen_ce_loss(global_logits, &hard_labels(p))?;
    Ok(DistillBreakdown {
        total: kl + beta * ce,
        kl,
        ce,
    })
}

struct DistillPass {
    graph: Graph,
    fwd: Forward,
    total: Var,
    kl: Var,
    ce: Var,
}

fn distill_pass(
    global: &DiffModel,
    synth: &Array2<f64>,
    p: &Array2<f64>,
    beta: f64,
    temperature: f64,
) -> Result<DistillPass> {
    if synth.nrows() != p.nrows() || p.ncols() != global.n_outputs() {
        return Err(Error::shape(format!(
            "synthetic batch {:?}, teacher logits {:?}, global emits {}",
            synth.dim(),
            p.dim(),
            global.n_outputs()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(synth.clone());
    let fwd = global.forward(&mut g, x, Mode::Train, true)?;
    let teacher = g.constant(p.clone());
    let kl = loss::kl_divergence(&mut g, teacher, fwd.output, temperature);
    let ce = loss::cross_entropy(&mut g, fwd.output, &hard_labels(p));
    let wce = g.scale(ce, beta);
    let total = g.add(kl, wce);
    Ok(DistillPass {
        graph: g,
        fwd,
        total,
        kl,
        ce,
    })
}

impl DistillPass {
    fn breakdown(&self) -> DistillBreakdown {
        DistillBreakdown {
            total: self.graph.scalar(self.total),
            kl: self.graph.scalar(self.kl),
            ce: self.graph.scalar(self.ce),
        }
    }
}

/// Distillation objective of `global` (train mode, as in the update step)
/// on a synthetic batch with teacher logits `p`.
pub fn distill_loss(
    synth: &Array2<f64>,
    p: &Array2<f64>,
    global: &DiffModel,
    beta: f64,
    temperature: f64,
) -> Result<DistillBreakdown> {
    Ok(distill_pass(global, synth, p, beta, temperature)?.breakdown())
}

/// [`distill_loss`] with its gradient w.r.t. the global model's parameters.
pub fn distill_loss_grad(
    synth: &Array2<f64>,
    p: &Array2<f64>,
    global: &DiffModel,
    beta: f64,
    temperature: f64,
) -> Result<(DistillBreakdown, Vec<f64>)> {
    let pass = distill_pass(global, synth, p, beta, temperature)?;
    let grads = pass.graph.backward(pass.total);
    Ok((pass.breakdown(), global.flat_grad(&grads, &pass.fwd)))
}

/// Output of one generator round.
#[derive(Clone, Debug)]
pub struct GeneratorRound {
    pub generator: DiffModel,
    /// Final synthetic batch (`b × feature_dim`).
    pub synth: Array2<f64>,
    pub labels: Vec<usize>,
    /// Teacher logits on `synth`.
    pub logits: Array2<f64>,
    /// Objective at the last step, before its update.
    pub loss: GenLossBreakdown,
}

struct GeneratorState {
    generator: DiffModel,
    opt: Optimizer,
}

fn sample_batch(rng: &mut LabRng, b: usize, noise_dim: usize, c: usize) -> (Array2<f64>, Vec<usize>) {
    let noise = Array2::from_shape_fn((b, noise_dim), |_| StandardNormal.sample(rng));
    let labels = (0..b).map(|_| rng.random_range(0..c)).collect();
    (noise, labels)
}

impl GeneratorState {
    #[allow(clippy::too_many_arguments)]
    fn round(
        &mut self,
        clients: &[DiffModel],
        ensemble: Ensemble<'_>,
        global: &DiffModel,
        cfg: &DistillConfig,
        weights: &GenLossWeights,
        seed: u64,
    ) -> Result<GeneratorRound> {
        let (_, c) = check_clients(clients)?;
        let mut rng = rng::rng_for(seed, &[rng::tag("synth-batch")]);
        let (noise, labels) = sample_batch(&mut rng, cfg.batch_size, cfg.noise_dim, c);
        let input = generator_input(&noise, &labels, &self.generator)?;

        let mut last = GenLossBreakdown::default();
        for step in 0..cfg.generator_steps {
            let pass = gen_pass(
                &self.generator,
                &input,
                &labels,
                clients,
                ensemble,
                global,
                weights,
                cfg.temperature,
            )?;
            last = pass.nodes.breakdown(&pass.graph);
            finite(last.total, "generator objective", step)?;
            let grads = pass.graph.backward(pass.nodes.total);
            let grad = self.generator.flat_grad(&grads, &pass.fwd);
            self.opt.step(self.generator.params_mut(), &grad);
            self.generator.commit_batch_stats(&pass.graph, &pass.fwd);
        }

        let pass = gen_pass(
            &self.generator,
            &input,
            &labels,
            clients,
            ensemble,
            global,
            weights,
            cfg.temperature,
        )?;
        Ok(GeneratorRound {
            generator: self.generator.clone(),
            synth: pass.graph.value(pass.fwd.output).clone(),
            logits: pass.graph.value(pass.nodes.p).clone(),
            labels,
            loss: last,
        })
    }
}

/// Sample one noise/label batch (labels uniform over the classes) and run
/// `cfg.generator_steps` updates of the generator objective on it. Inputs
/// are only read; the updated generator is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_generator_round(
    generator: &DiffModel,
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    global: &DiffModel,
    cfg: &DistillConfig,
    weights: &GenLossWeights,
    seed: u64,
) -> Result<GeneratorRound> {
    cfg.validate()?;
    weights.validate()?;
    let mut state = GeneratorState {
        generator: generator.clone(),
        opt: Optimizer::new(cfg.generator_optimizer, cfg.generator_lr, generator.n_params()),
    };
    state.round(clients, ensemble, global, cfg, weights, seed)
}

/// One global epoch of the distillation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gen_loss: f64,
    pub ce: f64,
    pub bn: f64,
    pub ad: f64,
    pub distill_kl: f64,
    pub distill_ce: f64,
    pub test_top1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub global: DiffModel,
    pub generator: DiffModel,
    pub epochs: Vec<EpochRecord>,
}

/// The shared generation/distillation loop.
///
/// `init` warm-starts the global model; otherwise it is built from
/// `cfg.global_arch`. When `test` is given each epoch records its top-1
/// accuracy.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation(
    clients: &[DiffModel],
    ensemble: Ensemble<'_>,
    cfg: &DistillConfig,
    weights: &GenLossWeights,
    seed: u64,
    init: Option<&DiffModel>,
    test: Option<&LabeledDataset>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    weights.validate()?;
    let (d, c) = check_clients(clients)?;
    ensemble.check(clients.len(), c)?;

    let mut global = match init {
        Some(m) if m.input_dim() == d && m.n_outputs() == c => m.clone(),
        Some(m) => {
            return Err(Error::shape(format!(
                "initial global model maps {}→{}, clients {d}→{c}",
                m.input_dim(),
                m.n_outputs()
            )))
        }
        None => build_classifier(&cfg.global_arch, d, c, rng::derive_seed(seed, &[rng::tag("global")]))?,
    };
    let generator = build_generator_with(
        &cfg.generator_spec(d, c),
        rng::derive_seed(seed, &[rng::tag("generator")]),
    )?;
    let mut state = GeneratorState {
        opt: Optimizer::new(cfg.generator_optimizer, cfg.generator_lr, generator.n_params()),
        generator,
    };
    let mut global_opt = Optimizer::new(cfg.global_optimizer, cfg.global_lr, global.n_params());

    let mut epochs = Vec::with_capacity(cfg.global_epochs);
    for epoch in 0..cfg.global_epochs {
        let round_seed = rng::derive_seed(seed, &[rng::tag("epoch"), epoch as u64]);
        let gen = state.round(clients, ensemble, &global, cfg, weights, round_seed)?;

        let mut distilled = DistillBreakdown::default();
        for step in 0..cfg.distill_steps {
            let pass = distill_pass(&global, &gen.synth, &gen.logits, cfg.beta, cfg.temperature)?;
            distilled = pass.breakdown();
            finite(distilled.total, format!("distillation (epoch {epoch})"), step)?;
            let grads = pass.graph.backward(pass.total);
            let grad = global.flat_grad(&grads, &pass.fwd);
            global_opt.step(global.params_mut(), &grad);
            global.commit_batch_stats(&pass.graph, &pass.fwd);
        }

        let test_top1 = test.map(|t| crate::experiment::evaluate_top1(&global, t)).transpose()?;
        epochs.push(EpochRecord {
            epoch,
            gen_loss: gen.loss.total,
            ce: gen.loss.ce,
            bn: gen.loss.bn,
            ad: gen.loss.ad,
            distill_kl: distilled.kl,
            distill_ce: distilled.ce,
            test_top1,
        });
    }
    Ok(DistillOutcome {
        global,
        generator: state.generator,
        epochs,
    })
}

/// Distill client models into a global model through the stratified
/// ensemble defined by `caps`.
pub fn fedhydra(
    clients: &[DiffModel],
    caps: &CapabilityMatrices,
    cfg: &DistillConfig,
    weights: &GenLossWeights,
    seed: u64,
    test: Option<&LabeledDataset>,
) -> Result<DistillOutcome> {
    run_distillation(clients, Ensemble::Stratified(caps), cfg, weights, seed, None, test)
}

/// Everything needed to go from client shards to a global model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// One architecture for every client, or one per client.
    pub architectures: Vec<String>,
    pub local: LocalConfig,
    pub stratify: StratifyConfig,
    pub distill: DistillConfig,
    pub weights: GenLossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            architectures: vec!["mlp_small".into()],
            local: LocalConfig::default(),
            stratify: StratifyConfig::default(),
            distill: DistillConfig::default(),
            weights: GenLossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    FedHydra,
    Dense,
}

/// Client models after one round of local training.
#[derive(Clone, Debug)]
pub struct ClientRound {
    pub models: Vec<DiffModel>,
    pub histories: Vec<Vec<EpochStats>>,
    pub elapsed: Duration,
}

/// Build (round 0) or re-initialise (later rounds) the clients and train
/// them on their shards. Clients whose architecture matches `global` start
/// from its parameters; the rest start from scratch.
pub fn train_round_clients(
    shards: &[LabeledDataset],
    pipeline: &PipelineConfig,
    global: Option<&DiffModel>,
    round: usize,
    seed: u64,
) -> Result<ClientRound> {
    let first = shards.first().ok_or_else(|| Error::invalid("no client shards"))?;
    let (d, c) = (first.feature_dim(), first.n_classes());
    let archs = client::client_architectures(&pipeline.architectures, shards.len())?;
    let mut models = client::initial_client_models(&archs, d, c, rng::derive_seed(seed, &[rng::tag("clients")]))?;
    if let Some(g) = global {
        for m in models.iter_mut().filter(|m| m.same_structure(g)) {
            m.load_state_from(g)?;
        }
    }
    let started = Instant::now();
    let local_seed = rng::derive_seed(seed, &[rng::tag("local"), round as u64]);
    let (models, histories) = client::train_clients(models, shards, &pipeline.local, local_seed)?;
    Ok(ClientRound {
        models,
        histories,
        elapsed: started.elapsed(),
    })
}

/// Everything produced by one round of a multi-round run.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: usize,
    pub clients: ClientRound,
    /// Present when the method stratifies clients.
    pub caps: Option<CapabilityMatrices>,
    pub stratify_elapsed: Option<Duration>,
    pub distill: DistillOutcome,
    pub distill_elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct MultiRoundOutcome {
    pub global: DiffModel,
    pub rounds: Vec<RoundOutcome>,
}

/// Repeat local training, stratification (FedHydra only) and distillation
/// for `rounds` rounds, warm-starting clients and the global model from the
/// previous round's global model. `first` supplies precomputed round-0
/// clients, which must equal what [`train_round_clients`] would produce.
#[allow(clippy::too_many_arguments)]
pub fn multi_round(
    shards: &[LabeledDataset],
    rounds: usize,
    pipeline: &PipelineConfig,
    method: DistillMethod,
    seed: u64,
    test: Option<&LabeledDataset>,
    first: Option<ClientRound>,
) -> Result<MultiRoundOutcome> {
    if rounds == 0 {
        return Err(Error::invalid("at least one round is required"));
    }
    let mut first = first;
    let mut global: Option<DiffModel> = None;
    let mut outcomes = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let clients = match first.take() {
            Some(pre) if round == 0 => pre,
            _ => train_round_clients(shards, pipeline, global.as_ref(), round, seed).stage("local training")?,
        };
        let (caps, stratify_elapsed) = match method {
            DistillMethod::FedHydra => {
                let started = Instant::now();
                let caps = model_stratification(
                    &clients.models,
                    &pipeline.stratify,
                    rng::derive_seed(seed, &[rng::tag("ms"), round as u64]),
                )
                .stage("model stratification")?;
                (Some(caps), Some(started.elapsed()))
            }
            DistillMethod::Dense => (None, None),
        };
        let ensemble = caps.as_ref().map_or(Ensemble::Average, Ensemble::Stratified);
        let started = Instant::now();
        let distill = run_distillation(
            &clients.models,
            ensemble,
            &pipeline.distill,
            &pipeline.weights,
            rng::derive_seed(seed, &[rng::tag("distill"), round as u64]),
            global.as_ref(),
            test,
        )
        .stage("distillation")?;
        let distill_elapsed = started.elapsed();
        global = Some(distill.global.clone());
        outcomes.push(RoundOutcome {
            round,
            clients,
            caps,
            stratify_elapsed,
            distill,
            distill_elapsed,
        });
    }
    Ok(MultiRoundOutcome {
        global: global.expect("at least one round"),
        rounds: outcomes,
    })
}
