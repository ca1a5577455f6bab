use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command line, each with its exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {} (run the producing stage first)", .0.display())]
    Missing(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("acceptance threshold not met: {0}")]
    Threshold(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl From<commdecode::Error> for CliError {
    fn from(e: commdecode::Error) -> Self {
        match e {
            commdecode::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
