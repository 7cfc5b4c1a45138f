//! Stage drivers behind the `scv2` executable.

pub mod config;
pub mod metrics;
pub mod stages;

use scv2_core::Error;

/// Every failure maps to one documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments, or a violated precondition (exit 2).
    #[error("{0}")]
    Config(String),
    /// Missing, unreadable or malformed inputs and artifacts (exit 3).
    #[error("{0}")]
    Data(String),
    /// Non-finite losses or a surfel-count explosion (exit 4).
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Contract(_) => CliError::Config(e.to_string()),
            Error::Divergence(_) | Error::CountExplosion { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("I/O error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
