use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: key `{key}`: {message}")]
    Config { line: usize, key: String, message: String },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }

    pub(crate) fn config(line: usize, key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { line, key: key.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the CLI: 2 config, 3 divergence, 4 I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Divergence(_) | Error::NonFinite(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
