use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid filter cutoffs: {0}")]
    InvalidCutoff(String),
    #[error("unstable filter design: pole magnitude {0:.6} >= 1")]
    UnstableFilter(f64),
    #[error("series of length {len} too short for padding of {pad} samples")]
    SeriesTooShort { len: usize, pad: usize },
    #[error("segmentation failed: {0}")]
    Segmentation(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("negative entry in non-negative input at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unsupported bundle format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("frame out of order: t={t} after t={last}")]
    OutOfOrder { t: f64, last: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
