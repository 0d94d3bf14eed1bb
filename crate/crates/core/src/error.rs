use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("partition failed: client {client} still empty after {retries} redraws")]
    PartitionFailure { client: usize, retries: usize },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("non-finite loss during {context} (step {step}, value {value})")]
    NonFiniteLoss {
        context: String,
        step: usize,
        value: f64,
    },

    #[error("model `{0}` has no batch-norm layers")]
    NoBnLayers(String),

    #[error("batch too small: {0} rows, batch statistics need at least 2")]
    BatchTooSmall(usize),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Attach a stage name to errors bubbling out of an orchestration step.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        })
    }
}
