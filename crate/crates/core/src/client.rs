//! Local client training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::nnkit::{loss, DiffModel, Graph, Mode};
use crate::rng;

/// A client's model together with its private shard.
#[derive(Clone, Debug)]
pub struct ClientBundle {
    pub client_id: usize,
    pub model: DiffModel,
    pub shard: LabeledDataset,
}

impl ClientBundle {
    pub fn new(client_id: usize, model: DiffModel, shard: LabeledDataset) -> Result<Self> {
        if model.n_outputs() != shard.n_classes() {
            return Err(Error::shape(format!(
                "client {client_id}: model emits {} logits for {} classes",
                model.n_outputs(),
                shard.n_classes()
            )));
        }
        if model.input_dim() != shard.feature_dim() {
            return Err(Error::shape(format!(
                "client {client_id}: model takes {} features, shard has {}",
                model.input_dim(),
                shard.feature_dim()
            )));
        }
        Ok(Self {
            client_id,
            model,
            shard,
        })
    }
}

/// Mini-batch SGD settings for local training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LocalConfig {
    /// Full-scale values: `η = 0.01`, `B = 128`, `E = 200`.
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Minimise cross-entropy on the client's shard with plain mini-batch SGD.
///
/// Batches are reshuffled every epoch from a stream keyed by `seed`. Returns
/// the trained model and one [`EpochStats`] row per epoch (mean batch loss and
/// train-mode accuracy over the epoch).
pub fn local_update(bundle: &ClientBundle, cfg: &LocalConfig, seed: u64) -> Result<(DiffModel, Vec<EpochStats>)> {
    let shard = &bundle.shard;
    if shard.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", bundle.client_id)));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("invalid local config {cfg:?}")));
    }
    let mut model = bundle.model.clone();
    let mut rng = rng::rng_for(seed, &[rng::tag("local"), bundle.client_id as u64]);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            // A lone trailing sample has no batch statistics to learn from.
            if batch.len() == 1 && shard.len() > 1 {
                continue;
            }
            let (x, y) = shard.rows(batch);
            let mut g = Graph::new();
            let input = g.constant(x);
            let fwd = model.forward(&mut g, input, Mode::Train, true)?;
            let l = loss::cross_entropy(&mut g, fwd.output, &y);
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("local update of client {} (epoch {epoch})", bundle.client_id),
                    step,
                    value,
                });
            }
            let grads = g.backward(l);
            let grad = model.flat_grad(&grads, &fwd);
            for (p, d) in model.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.lr * d;
            }
            model.commit_batch_stats(&g, &fwd);

            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            correct += crate::sagg::hard_labels(g.value(fwd.output))
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
        }
        let denom = seen.max(1) as f64;
        history.push(EpochStats {
            epoch,
            loss: loss_sum / denom,
            train_acc: correct as f64 / denom,
        });
    }
    Ok((model, history))
}

/// Resolve the per-client architecture list: one entry broadcasts to every
/// client, otherwise exactly `m` entries are required.
pub fn client_architectures(architectures: &[String], m: usize) -> Result<Vec<String>> {
    match architectures.len() {
        1 => Ok(vec![architectures[0].clone(); m]),
        n if n == m => Ok(architectures.to_vec()),
        n => Err(Error::Config(format!("{n} architectures given for {m} clients"))),
    }
}

/// Fresh client models. Clients sharing an architecture share their
/// initial parameters, as parameter averaging expects.
pub fn initial_client_models(
    architectures: &[String],
    feature_dim: usize,
    c: usize,
    seed: u64,
) -> Result<Vec<DiffModel>> {
    architectures
        .iter()
        .map(|arch| {
            let init = rng::derive_seed(seed, &[rng::tag("client-init"), rng::tag(arch)]);
            crate::nnkit::build_classifier(arch, feature_dim, c, init)
        })
        .collect()
}

/// Train every client on its shard, in parallel. Output order follows
/// the input order.
pub fn train_clients(
    models: Vec<DiffModel>,
    shards: &[LabeledDataset],
    cfg: &LocalConfig,
    seed: u64,
) -> Result<(Vec<DiffModel>, Vec<Vec<EpochStats>>)> {
    use rayon::prelude::*;

    if models.len() != shards.len() {
        return Err(Error::invalid(format!(
            "{} models for {} shards",
            models.len(),
            shards.len()
        )));
    }
    let bundles = models
        .into_iter()
        .zip(shards)
        .enumerate()
        .map(|(k, (model, shard))| ClientBundle::new(k, model, shard.clone()))
        .collect::<Result<Vec<_>>>()?;
    let trained: Vec<(DiffModel, Vec<EpochStats>)> = bundles
        .par_iter()
        .map(|b| local_update(b, cfg, seed))
        .collect::<Result<_>>()?;
    Ok(trained.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_synthetic_dataset;
    use crate::experiment::evaluate_top1;
    use crate::nnkit::build_classifier;

    fn bundle(spread: f64) -> ClientBundle {
        let data = make_synthetic_dataset(2, 60, 4, spread, 3).unwrap();
        let model = build_classifier("mlp_small", 4, 2, 1).unwrap();
        ClientBundle::new(0, model, data).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let b = bundle(0.2);
        let cfg = LocalConfig {
            epochs: 0,
            batch_size: 16,
            lr: 0.1,
        };
        let (m, hist) = local_update(&b, &cfg, 0).unwrap();
        assert_eq!(m.params(), b.model.params());
        assert!(hist.is_empty());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let b = bundle(0.2);
        let cfg = LocalConfig {
            epochs: 50,
            batch_size: 16,
            lr: 0.05,
        };
        let (m, hist) = local_update(&b, &cfg, 4).unwrap();
        assert!(evaluate_top1(&m, &b.shard).unwrap() >= 0.95);
        let improving = hist.windows(2).filter(|w| w[1].loss <= w[0].loss).count();
        assert!(improving as f64 >= 0.8 * (hist.len() - 1) as f64 || hist.last().unwrap().loss < 0.05);
        let (again, _) = local_update(&b, &cfg, 4).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn reference_defaults() {
        let d = LocalConfig::default();
        assert_eq!((d.lr, d.batch_size, d.epochs), (0.01, 128, 200));
    }

    #[test]
    fn bundle_rejects_class_mismatch() {
        let data = make_synthetic_dataset(3, 5, 4, 0.2, 0).unwrap();
        let model = build_classifier("mlp_small", 4, 2, 0).unwrap();
        assert!(ClientBundle::new(0, model, data).is_err());
    }

    #[test]
    fn running_mean_tracks_shifted_inputs() {
        // Oracle: the pre-BN activations of mlp_small are x·W + b. With a
        // tiny learning rate W and b barely move, so the running mean should
        // approach the directly accumulated mean of those activations.
        let mut data = make_synthetic_dataset(2, 64, 3, 0.3, 0).unwrap();
        let shifted = data.features().mapv(|v| v + 5.0);
        data = LabeledDataset::new(shifted, data.labels().to_vec(), 2).unwrap();
        let model = build_classifier("mlp_small", 3, 2, 2).unwrap();
        let b = ClientBundle::new(0, model.clone(), data.clone()).unwrap();
        let cfg = LocalConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-6,
        };
        let (trained, _) = local_update(&b, &cfg, 0).unwrap();
        let direct = model.bn_batch_stats(data.features()).unwrap();
        let before = model.bn_running_stats().unwrap();
        let after = trained.bn_running_stats().unwrap();
        let dist = |m: &[f64]| {
            m.iter()
                .zip(&direct.layers[0].mean)
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>()
                .sqrt()
        };
        let (d0, d1) = (dist(&before.layers[0].mean), dist(&after.layers[0].mean));
        assert!(d0 > 1.0, "shift should move the activations: {d0}");
        assert!(d1 < 0.05 * d0, "{d0} -> {d1}");
    }
}
