use thiserror::Error;

pub type Result<T, E = AoaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AoaError {
    #[error("invalid array geometry: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("covariance is numerically singular ({0}); use a nonzero diagonal loading")]
    Singular(String),

    #[error("non-finite activation in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AoaError {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        AoaError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        AoaError::InvalidArgument(message.into())
    }
}
