use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the planning toolkit.
#[derive(Debug, Error)]
pub enum KinoError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("scene generation for {system} failed after {attempts} attempts")]
    SceneGeneration { system: String, attempts: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("node {0} is not attached to the tree")]
    DetachedNode(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = KinoError> = std::result::Result<T, E>;

impl KinoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KinoError::Io {
            path: path.into(),
            source,
        }
    }
}
