use dfg_core::DfgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] DfgError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 config, 3 numeric abort, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(DfgError::Config(_)) => 2,
            CliError::Core(DfgError::NonFinite { .. }) => 3,
            CliError::Io { .. }
            | CliError::Core(DfgError::Io(_) | DfgError::Format { .. } | DfgError::Checkpoint(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}
