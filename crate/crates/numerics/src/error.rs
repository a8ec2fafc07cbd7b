use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// API misuse, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
