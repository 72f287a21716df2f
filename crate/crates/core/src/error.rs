use thiserror::Error;

/// Errors raised by the point-process, policy and training machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("event at t={time} is not covered by the intensity trajectory")]
    Coverage { time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {tensor}")]
    NumericalOverflow { tensor: String },

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("environment failure: {0}")]
    Environment(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
