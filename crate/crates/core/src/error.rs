use std::path::PathBuf;

/// Errors raised anywhere in the learning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: line {line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("stream is empty")]
    EmptyStream,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("layer {layer}: factor is not positive definite after jitter up to {max_jitter:e}")]
    NotPositiveDefinite { layer: usize, max_jitter: f64 },

    #[error("head for class {0} already exists")]
    DuplicateHead(u32),

    #[error("no head for class {0}")]
    UnknownHead(u32),

    #[error("no trained heads available for prediction")]
    NoTrainedHeads,

    #[error("training data for class {0} must contain both positive and negative labels")]
    SingleLabel(u32),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// runtime failures.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::Schema(_) => true,
            Error::Context { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
