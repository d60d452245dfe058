use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] gprompt_core::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 2 for usage, input and configuration problems, 3 for a numerical
    /// abort, 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        use gprompt_core::Error as E;
        match self {
            CliError::Core(E::NumericalAbort { .. }) => 3,
            CliError::Core(
                E::Rank { .. } | E::MissingGradient { .. } | E::Contract(_) | E::Undefined(_),
            )
            | CliError::Json(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
