use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("invalid expression: {0}")]
    InvalidExpression(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("dataset version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: String, supported: String },

    #[error("invariant violation in sample {index}: {message}")]
    InvariantViolation { index: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
