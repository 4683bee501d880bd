use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file: {0}")]
    Weights(#[from] WeightsError),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset {0} contains no PNG images")]
    EmptyDataset(PathBuf),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}

/// Failures while reading or applying a HAATW weight file.
#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 8]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("tensor `{name}` has {expected} values according to its dims but the data is malformed")]
    BadTensor { name: String, expected: usize },

    #[error("tensor count mismatch: file has {found}, model expects {expected}")]
    CountMismatch { expected: usize, found: usize },

    #[error("tensor #{index} name mismatch: file has `{found}`, model expects `{expected}`")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("tensor `{name}` shape mismatch: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
