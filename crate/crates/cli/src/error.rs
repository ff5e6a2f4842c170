use std::fmt;

use vac_core::VacError;

/// Harness errors, grouped by process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs that do not fit together (exit 1).
    Validation(String),
    /// NaN or infinity during computation (exit 2).
    Numeric(String),
    /// Missing, unreadable or malformed files (exit 3).
    Io(String),
}

impl CliError {
    pub fn io(context: impl fmt::Display, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "I/O failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<VacError> for CliError {
    fn from(e: VacError) -> Self {
        let msg = e.to_string();
        match e {
            VacError::Config(_) | VacError::Shape { .. } | VacError::Data(_) => CliError::Validation(msg),
            VacError::Numeric { .. } => CliError::Numeric(msg),
            VacError::Format(_) | VacError::Truncated(_) | VacError::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
