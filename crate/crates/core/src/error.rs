use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    Dims { left: [usize; 3], right: [usize; 3] },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("downsample error: dims {dims:?} not divisible by factor {factor:?}")]
    Downsample { dims: [usize; 3], factor: [usize; 3] },

    #[error("range error: {0}")]
    Range(String),

    #[error("structure mask is empty")]
    EmptyStructure,

    #[error("point set is empty")]
    EmptySet,

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training error: {0}")]
    Train(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: parse error at {context}: {message}")]
    Parse {
        path: PathBuf,
        context: String,
        message: String,
    },

    #[error("{path}: corrupt model file: {message}")]
    CorruptModel { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dims { .. } => "dims",
            Error::Shape(_) => "shape",
            Error::Resample(_) => "resample",
            Error::Downsample { .. } => "downsample",
            Error::Range(_) => "range",
            Error::EmptyStructure => "empty_structure",
            Error::EmptySet => "empty_set",
            Error::Config { .. } => "config",
            Error::Train(_) => "train",
            Error::Spec(_) => "spec",
            Error::Verification(_) => "verification",
            Error::Parse { .. } => "parse",
            Error::CorruptModel { .. } => "corrupt_model",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
