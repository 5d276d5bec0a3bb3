use thiserror::Error;

/// Errors raised by the laboratory's domain operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sequence space: {0}")]
    InvalidSpace(String),

    #[error("space has {count} outcomes, above the enumeration cap of {cap}")]
    SpaceTooLarge { count: u128, cap: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("outcome index {index} out of range for {count} outcomes")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("root finder did not converge within bracket [{lo}, {hi}] (residual {residual:e})")]
    NoConvergence { lo: f64, hi: f64, residual: f64 },

    #[error("could not bracket the multiplier: {0}")]
    BracketFailure(String),

    #[error("training aborted: {reason}")]
    Aborted {
        reason: String,
        trace: Box<crate::trainer::TrainTrace>,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
