use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration left the valid domain at step {step} (region {region}): {detail}")]
    Integration {
        step: usize,
        region: usize,
        detail: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unstable model: spectral radius {0:.12}")]
    Unstable(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("estimation failed after {iterations} iterations: {reason}")]
    Estimation {
        iterations: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("batch failed: {failed} of {total} cells failed")]
    Batch { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
