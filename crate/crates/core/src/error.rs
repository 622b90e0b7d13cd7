use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("words do not cover the characters: first divergence at character {position}")]
    Alignment { position: usize },

    #[error("label {label:?} is not in the {vocab} vocabulary")]
    Encoding { vocab: &'static str, label: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("no gradient supplied for trainable parameter {0:?}")]
    MissingGradient(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("segmenter output does not cover the input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary hash mismatch: model has {expected}, data was encoded with {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the filesystem or network rather than by
    /// the inputs themselves.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Segmentation(_))
    }
}
