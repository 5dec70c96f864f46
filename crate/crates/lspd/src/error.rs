use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step sizes violate stability")]
    Divergence,
    #[error("gradient blow-up: {0}")]
    GradientBlowUp(String),
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("unrecognized dataset file: {0}")]
    DatasetFormat(String),
    #[error("unrecognized checkpoint file: {0}")]
    CheckpointFormat(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("theory harness error: {0}")]
    Theory(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
