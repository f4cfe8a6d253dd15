use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    MissingPrerequisite,
    Numerical,
    Io,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{stage} diverged at iteration {iteration}: {detail}")]
    Diverged {
        stage: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("bad tensor file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing {what}; run `{command}` first")]
    MissingPrerequisite { what: String, command: &'static str },

    #[error("{what} was produced by config {found}, current config is {expected} (pass --allow-hash-mismatch to override)")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    StageOrder(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::MissingPrerequisite { .. } | Error::StageOrder(_) | Error::HashMismatch { .. } => {
                ErrorKind::MissingPrerequisite
            }
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            _ => ErrorKind::Other,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
