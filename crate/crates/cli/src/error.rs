use remix_core::RemixError;
use thiserror::Error;

/// Command failure, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<RemixError> for CliError {
    fn from(err: RemixError) -> Self {
        match err {
            RemixError::Divergence { .. } => CliError::Divergence(err.to_string()),
            RemixError::InvalidArgument(_) | RemixError::Checkpoint(_) => CliError::Config(err.to_string()),
            other => CliError::Verification(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
