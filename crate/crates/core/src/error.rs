use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SgcnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SgcnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("non-finite coordinate in trajectory")]
    NonFinite,

    #[error("{path}: line {line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("gradient check: {0}")]
    Gradcheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SgcnError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SgcnError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SgcnError::InvalidArgument(msg.into())
    }
}
