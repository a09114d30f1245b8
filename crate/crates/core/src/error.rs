use std::path::PathBuf;

use absa_numeric::NumericError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("parse error: no instances")]
    NoInstances,

    #[error("invalid instance `{id}`: {reason}")]
    InvalidInstance { id: String, reason: String },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("unsupported transformation on `{id}`: {reason}")]
    Transform { id: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (instances {first_id}..)")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_id: String,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("group `{0}` has no Original member")]
    MissingOriginal(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient self-check failed: max relative error {max_rel_error:e} > {tolerance:e} at {location}")]
    SelfCheck {
        max_rel_error: f64,
        tolerance: f64,
        location: String,
    },

    #[error(transparent)]
    Numeric(#[from] NumericError),

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

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
