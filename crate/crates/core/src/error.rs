use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or out-of-inventory data.
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("decode error: no finished hypothesis within {max_len} steps (best partial: {partial:?})")]
    Decode { max_len: usize, partial: Vec<String> },
    /// A metric whose denominator is zero.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: String },
    #[error("lineage conflict: {0}")]
    Lineage(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Numerics(#[from] rlfb_numerics::NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
