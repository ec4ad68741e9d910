use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the validity box of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The gas-path chain produced a non-physical intermediate.
    #[error("model-range error: {0}")]
    ModelRange(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Cholesky factorisation of a filter covariance failed.
    #[error("covariance not positive definite at step {step}")]
    Cholesky { step: u64 },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
