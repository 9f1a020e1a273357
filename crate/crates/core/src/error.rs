use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrptError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward already ran on this record")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("weight file error at byte {offset}: {message}")]
    Container { offset: usize, message: String },
    #[error("structural error: {0}")]
    Structure(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("data leak: {0}")]
    Leak(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FrptError> = std::result::Result<T, E>;

impl FrptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FrptError::Io { path: path.into(), source }
    }
}
