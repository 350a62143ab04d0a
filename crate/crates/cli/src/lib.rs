//! Library side of the `graybox` command-line tool: configuration, pipeline
//! stages, run manifests and replay.

pub mod config;
pub mod estimator;
pub mod manifest;
pub mod stages;

use thiserror::Error;

/// Errors surfaced by the CLI, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or missing inputs (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running a stage (exit code 1).
    #[error("runtime error: {0}")]
    Runtime(String),
    /// A validation check failed, e.g. a replay mismatch (exit code 3).
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<graybox_core::Error> for CliError {
    fn from(e: graybox_core::Error) -> Self {
        match e {
            graybox_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}
