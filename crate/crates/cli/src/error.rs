//! Error taxonomy mapped onto process exit codes.
//!
//! Every failure a command can hit is classified by who must act on it:
//! configuration mistakes (exit 2) are fixed by editing flags or files,
//! data/numeric failures (exit 3) mean a run or an artifact went bad, and
//! threshold failures (exit 4) are healthy runs whose measured numbers
//! missed a declared gate — the code CI latches on.

use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or contradictory configuration; nothing was computed.
    #[error("config error: {0}")]
    Config(String),
    /// Runtime failure: unreadable/corrupt artifacts, I/O, or a numeric
    /// breakdown (non-finite loss, diverged integration).
    #[error("run failed: {0}")]
    Data(String),
    /// The run completed but a measured value violated a declared
    /// threshold or expectation.
    #[error("threshold failure: {0}")]
    Audit(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn audit(msg: impl Into<String>) -> Self {
        CliError::Audit(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) => ExitCode::from(3),
            CliError::Audit(_) => ExitCode::from(4),
        }
    }
}

/// I/O problems are runtime data failures: the config was well-formed, the
/// environment failed it.
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
