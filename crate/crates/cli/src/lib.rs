//! Library side of the `metafn` command: configuration and the commands
//! themselves, so that integration tests can drive them without a subprocess.

pub mod commands;
pub mod config;

pub use commands::{run, Command};
pub use config::RunConfig;

/// Failure of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<metafn_core::Error> for CliError {
    fn from(e: metafn_core::Error) -> Self {
        match e {
            metafn_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
