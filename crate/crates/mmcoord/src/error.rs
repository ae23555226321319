//! Shared error type for the library.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("dimension mismatch for modality '{modality}': declared {declared}, found {found}")]
    DimensionMismatch {
        modality: String,
        declared: usize,
        found: usize,
    },

    #[error("row index out of range: entity '{entity}', modality '{modality}', row {row} (matrix has {rows} rows)")]
    RowOutOfRange {
        entity: String,
        modality: String,
        row: usize,
        rows: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),

    #[error("empty positive set for query {0}")]
    EmptyPositives(usize),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical origin (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
