use std::io;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum VacError {
    /// Inconsistent configuration or layer wiring.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A NaN or infinity appeared; `context` names the layer or term.
    #[error("non-finite value in {context}")]
    Numeric { context: String },

    /// Malformed binary input (checkpoint, shard or IDX file).
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl VacError {
    pub fn numeric(context: impl Into<String>) -> Self {
        VacError::Numeric {
            context: context.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        VacError::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Prefix the error context, e.g. with an iteration index.
    pub fn within(self, outer: impl AsRef<str>) -> Self {
        let outer = outer.as_ref();
        match self {
            VacError::Numeric { context } => VacError::Numeric {
                context: format!("{outer}: {context}"),
            },
            VacError::Config(msg) => VacError::Config(format!("{outer}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T, E = VacError> = std::result::Result<T, E>;
