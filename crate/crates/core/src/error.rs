use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced in layer {layer}")]
    NumericOverflow { layer: &'static str },

    #[error("non-finite gradient passed to the {0} optimizer")]
    NonFiniteGradient(&'static str),

    #[error("{0}")]
    UnsupportedRegime(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QuineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuineError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = QuineError> = std::result::Result<T, E>;
