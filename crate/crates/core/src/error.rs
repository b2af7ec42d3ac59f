use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DfgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DfgError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("operation `{op}` has no second-order rule; it cannot appear on a create_graph path")]
    UnsupportedDoubleGrad { op: &'static str },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl DfgError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DfgError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        DfgError::InvalidArgument(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        DfgError::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DfgError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
