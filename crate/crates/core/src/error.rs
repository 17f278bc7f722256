use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("leaf `{0}` was not bound before forward")]
    UnboundLeaf(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("loss node {0} is not a scalar")]
    NonScalarLoss(usize),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask does not match network: {0}")]
    MaskMismatch(String),
    #[error("empty mask: nothing to train")]
    EmptyMask,
    #[error("{path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
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
}
