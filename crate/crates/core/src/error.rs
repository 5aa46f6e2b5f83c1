use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called on {0} without a cached train-mode forward")]
    BackwardWithoutForward(String),

    #[error("optimizer state is not attached to any parameters")]
    UninitializedOptimizer,

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid attribute assignment: {0}")]
    Assignment(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("training diverged for {0}")]
    Diverged(String),

    #[error("query set error: {0}")]
    QuerySet(String),

    #[error("query set hash mismatch: expected {expected}, got {got}")]
    QueryHashMismatch { expected: String, got: String },

    #[error("non-probability output: {0}")]
    NonProbability(String),

    #[error("black-box query failed: {0}")]
    BlackBox(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("bad container format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
