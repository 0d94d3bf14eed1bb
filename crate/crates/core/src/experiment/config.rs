use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::LocalConfig;
use crate::datagen::{Scenario, DEFAULT_MAX_RETRIES};
use crate::error::{Error, Result};
use crate::hasa::{DistillConfig, GenLossWeights, PipelineConfig};
use crate::nnkit::{OptimizerKind, CLASSIFIER_ARCHITECTURES};
use crate::stratify::{StratifyConfig, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedhydra")]
    FedHydra,
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "fedavg")]
    FedAvg,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FedHydra, Method::Dense, Method::FedAvg];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedHydra => "fedhydra",
            Method::Dense => "dense",
            Method::FedAvg => "fedavg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedhydra" => Ok(Method::FedHydra),
            "dense" | "dense_distill" => Ok(Method::Dense),
            "fedavg" => Ok(Method::FedAvg),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Every knob of an experiment, as a flat TOML document. Missing keys take
/// the desk-scale defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Dirichlet concentration; ignored by the other scenarios.
    pub alpha: f64,
    pub clients: usize,
    pub classes: usize,
    pub n_per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
    /// Test-set size as a fraction of the training set.
    pub test_fraction: f64,
    pub max_retries: usize,
    /// One entry for all clients, or one per client.
    pub architectures: Vec<String>,

    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub local_lr: f64,

    pub global_epochs: usize,
    pub generator_steps: usize,
    pub global_lr: f64,
    pub generator_lr: f64,
    pub synth_batch_size: usize,
    pub distill_steps: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub conditional: bool,
    pub generator_optimizer: OptimizerKind,
    pub global_optimizer: OptimizerKind,
    pub global_arch: String,

    pub lambda_bn: f64,
    pub lambda_adv: f64,
    pub beta: f64,
    pub temperature: f64,
    pub epsilon: f64,

    pub rounds: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::TwoClass,
            alpha: 0.1,
            clients: 5,
            classes: 10,
            n_per_class: 60,
            feature_dim: 10,
            spread: 0.8,
            test_fraction: 0.2,
            max_retries: DEFAULT_MAX_RETRIES,
            architectures: vec!["mlp_small".into()],
            local_epochs: 50,
            local_batch_size: 32,
            local_lr: 0.05,
            global_epochs: 120,
            generator_steps: 15,
            global_lr: 0.05,
            generator_lr: 1e-2,
            synth_batch_size: 64,
            distill_steps: 1,
            noise_dim: 16,
            generator_hidden: 64,
            conditional: true,
            generator_optimizer: OptimizerKind::Adam,
            global_optimizer: OptimizerKind::Sgd,
            global_arch: "mlp_small".into(),
            lambda_bn: 1.0,
            lambda_adv: 1.0,
            beta: 1.0,
            temperature: 1.0,
            epsilon: DEFAULT_EPSILON,
            rounds: 1,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("clients", self.clients),
            ("classes", self.classes),
            ("n_per_class", self.n_per_class),
            ("feature_dim", self.feature_dim),
            ("local_batch_size", self.local_batch_size),
            ("global_epochs", self.global_epochs),
            ("generator_steps", self.generator_steps),
            ("distill_steps", self.distill_steps),
            ("noise_dim", self.noise_dim),
            ("generator_hidden", self.generator_hidden),
            ("rounds", self.rounds),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let rates = [
            ("local_lr", self.local_lr),
            ("global_lr", self.global_lr),
            ("generator_lr", self.generator_lr),
            ("temperature", self.temperature),
            ("epsilon", self.epsilon),
            ("test_fraction", self.test_fraction),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_bn", self.lambda_bn),
            ("lambda_adv", self.lambda_adv),
            ("beta", self.beta),
            ("spread", self.spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.scenario == Scenario::Dirichlet && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.scenario == Scenario::TwoClass && 2 * self.clients != self.classes {
            return Err(Error::Config(format!(
                "two_class needs classes = 2·clients, got {} classes for {} clients",
                self.classes, self.clients
            )));
        }
        if self.synth_batch_size < 2 {
            return Err(Error::Config("synth_batch_size must be at least 2".into()));
        }
        if self.generator_steps < 2 && self.methods.contains(&Method::FedHydra) {
            return Err(Error::Config(
                "generator_steps must be at least 2 when stratifying clients".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let archs = &self.architectures;
        if archs.len() != 1 && archs.len() != self.clients {
            return Err(Error::Config(format!(
                "{} architectures given for {} clients",
                archs.len(),
                self.clients
            )));
        }
        for arch in archs.iter().chain(std::iter::once(&self.global_arch)) {
            if !CLASSIFIER_ARCHITECTURES.contains(&arch.as_str()) {
                return Err(Error::UnknownArchitecture(arch.clone()));
            }
        }
        if self.methods.contains(&Method::FedAvg) && archs.iter().any(|a| a != &archs[0]) {
            return Err(Error::ArchitectureMismatch(
                "fedavg needs every client to share one architecture".into(),
            ));
        }
        Ok(())
    }

    /// Parameter bundle for the training pipeline. Stratification probes
    /// reuse the generator step count, learning rate and batch size.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            architectures: self.architectures.clone(),
            local: LocalConfig {
                epochs: self.local_epochs,
                batch_size: self.local_batch_size,
                lr: self.local_lr,
            },
            stratify: StratifyConfig {
                noise_dim: self.noise_dim,
                generator_hidden: self.generator_hidden,
                conditional: self.conditional,
                steps: self.generator_steps,
                lr: self.generator_lr,
                batch_size: self.synth_batch_size,
                epsilon: self.epsilon,
                optimizer: self.generator_optimizer,
                parallel: true,
            },
            distill: DistillConfig {
                beta: self.beta,
                global_epochs: self.global_epochs,
                generator_steps: self.generator_steps,
                global_lr: self.global_lr,
                generator_lr: self.generator_lr,
                batch_size: self.synth_batch_size,
                temperature: self.temperature,
                distill_steps: self.distill_steps,
                noise_dim: self.noise_dim,
                generator_hidden: self.generator_hidden,
                conditional: self.conditional,
                generator_optimizer: self.generator_optimizer,
                global_optimizer: self.global_optimizer,
                global_arch: self.global_arch.clone(),
            },
            weights: GenLossWeights {
                lambda_bn: self.lambda_bn,
                lambda_adv: self.lambda_adv,
            },
        }
    }

    /// Short SHA-256 digest of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    /// Number of test samples per class.
    pub fn test_per_class(&self) -> usize {
        ((self.n_per_class as f64 * self.test_fraction).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("scenario = \"dirichlet\"\nalpha = 0.5\nmethods = [\"fedavg\"]\n").unwrap();
        assert_eq!(cfg.scenario, Scenario::Dirichlet);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.methods, vec![Method::FedAvg]);
        assert_eq!(cfg.clients, ExperimentConfig::default().clients);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(ExperimentConfig::from_toml_str("lamda_bn = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("clients = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("global_lr = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("architectures = [\"resnet\"]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"fedsgd\"]\n").is_err());
        let mixed = "clients = 2\nclasses = 4\narchitectures = [\"mlp_small\", \"mlp_wide\"]\n";
        assert!(ExperimentConfig::from_toml_str(mixed).is_err());
        let ok = format!("{mixed}methods = [\"fedhydra\"]\n");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.lambda_adv = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
