use std::process::ExitCode;

use thiserror::Error;

/// Failures mapped onto the exit-code contract: 2 for bad usage, config or
/// inputs, 3 for failures while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(e: impl ToString) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn runtime(e: impl ToString) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }
}

impl From<faps_core::config::ConfigError> for CliError {
    fn from(e: faps_core::config::ConfigError) -> Self {
        CliError::usage(e)
    }
}
