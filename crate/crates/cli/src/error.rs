use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage ordering error: `{command}` needs the output of `{missing}` ({detail})")]
    Ordering {
        command: String,
        missing: String,
        detail: String,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] lbq_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ordering { .. } => 3,
            CliError::Divergence(_) => 4,
            CliError::Io { .. } => 5,
            CliError::Core(lbq_core::Error::Divergence { .. }) => 4,
            CliError::Core(lbq_core::Error::Io(_)) => 5,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
