use std::io;

use thiserror::Error;

use crate::kspace::Domain;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented invariant or precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: expected {expected:?} volume, got {found:?}")]
    Domain { expected: Domain, found: Domain },

    /// Input carries no signal where a normalization needs some.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation was called on a model or object that does not support it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Lesion-negative ground truth; excluded from the primary Dice metric.
    #[error("ground truth is empty; excluded from lesion-positive metrics")]
    EmptyGroundTruth,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    /// A file was readable but its content is malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
