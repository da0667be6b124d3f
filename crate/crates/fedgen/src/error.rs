use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("ingestion error: missing or corrupt file {path}: {reason}")]
    IngestFile { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("privacy budget exhausted: only {spendable_steps} of {requested_steps} steps affordable")]
    BudgetExhausted {
        spendable_steps: usize,
        requested_steps: usize,
    },

    #[error("noise calibration failed: {0}")]
    Calibration(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}
