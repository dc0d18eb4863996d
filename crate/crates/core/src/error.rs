use thiserror::Error;

/// Errors raised across the corpus, model, training and metric layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("speaker `{0}` has no voiced frames")]
    EmptyStats(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("embedding provider `{id}` failed: {msg}")]
    Provider { id: String, msg: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
