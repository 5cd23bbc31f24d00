//! Front-end for bound computation, identity checks, measurement checks and
//! protocol simulation.

pub mod commands;
pub mod config;

use std::fmt;

use qbound_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug, Clone)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VERIFICATION,
            message: message.into(),
        }
    }

    pub fn io(e: std::io::Error) -> Self {
        CliError::numerical(format!("i/o: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidDimension(_)
            | Error::OutsideDomain(_)
            | Error::UnknownFamily(_)
            | Error::Validation(_)
            | Error::TooFewCopies(_)
            | Error::InsufficientTrials { .. }
            | Error::InvalidState(_)
            | Error::RankMismatch { .. }
            | Error::Degenerate { .. } => EXIT_CONFIG,
            _ => EXIT_NUMERICAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
