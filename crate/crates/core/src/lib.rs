//! One-shot federated learning lab.
//!
//! Synthetic client data and partitions ([`datagen`]), a small autodiff
//! model layer ([`nnkit`]), local training ([`client`]), per-class client
//! capability estimation ([`stratify`]), capability-weighted logit
//! aggregation ([`sagg`]), the generator/distillation loop ([`hasa`]),
//! reference baselines ([`baselines`]) and experiment orchestration
//! ([`experiment`]).

pub mod baselines;
pub mod client;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod hasa;
pub mod nnkit;
pub mod rng;
pub mod sagg;
pub mod stratify;

pub use baselines::{ae_logits, dense_distill, fedavg, fedavg_aggregate};
pub use client::{local_update, ClientBundle, EpochStats, LocalConfig};
pub use datagen::{
    heterogeneity_summary, make_synthetic_dataset, mean_label_entropy, partition_dirichlet, partition_iid,
    partition_two_class, LabeledDataset, PartitionSpec, Scenario,
};
pub use error::{Error, Result};
pub use experiment::{
    emit_results, evaluate_top1, plot_curves, run_experiment, ExperimentConfig, ExperimentResult, Method, MetricRow,
    ResultSummary,
};
pub use hasa::{
    ad_loss, bn_loss, distill_loss, fedhydra, gen_ce_loss, gen_total_loss, multi_round, train_generator_round,
    DistillConfig, DistillMethod, Ensemble, GenLossWeights, PipelineConfig,
};
pub use nnkit::{build_classifier, build_generator, DiffModel, Mode};
pub use sagg::{hard_labels, stratified_aggregate, LogitBatch};
pub use stratify::{model_stratification, CapabilityMatrices, StratifyConfig};
