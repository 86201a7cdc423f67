use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate set: {0}")]
    Degenerate(String),

    #[error("content hash mismatch for {path}: manifest says {expected}, payload hashes to {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("format version mismatch for {what}: expected {expected}, found {found}")]
    VersionMismatch {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
