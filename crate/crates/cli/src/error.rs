use std::path::PathBuf;
use thiserror::Error;

use roadnet_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: CoreError },
    #[error("{0}")]
    Validation(#[from] CoreError),
    #[error("{0}")]
    Invalid(String),
    #[error("self-test failed")]
    SelfTest,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Validation(CoreError::Io(_)) => 2,
            CliError::Validation(_) | CliError::Invalid(_) => 3,
            CliError::SelfTest => 4,
        }
    }

    /// Attaches a path to failures of file access and decoding; semantic
    /// problems with the file's content stay validation errors.
    pub fn at(path: impl Into<PathBuf>) -> impl FnOnce(CoreError) -> CliError {
        let path = path.into();
        move |source| match source {
            CoreError::Io(_) | CoreError::Format(_) => CliError::Io { path, source },
            other => CliError::Validation(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
