//! Crate error type.

use thiserror::Error;

/// A single query-validation problem, with a source position when the query
/// came from text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub message: String,
    /// Byte offset into the query text, when known.
    pub position: Option<usize>,
}

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.position {
            Some(p) => write!(f, "{} (at offset {p})", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown variable {0}")]
    UnknownVariable(String),

    #[error("value {value:?} not in the domain of {target}")]
    OutOfDomain { target: String, value: String },

    #[error("proposer contract violation: {0}")]
    Contract(String),

    #[error("store corruption: {0}")]
    Corruption(String),

    #[error("{path}:{line}: {message}")]
    Corpus {
        path: String,
        line: usize,
        message: String,
    },

    #[error("parse error at offset {position}: {message}")]
    Parse { message: String, position: usize },

    #[error("query validation failed: {}", format_validation(.0))]
    Validation(Vec<ValidationError>),

    #[error("state space of {size} assignments exceeds the cap of {cap}")]
    CapExceeded { size: u128, cap: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model file {path}:{line}: {message}")]
    Model {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_validation(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Process exit code the CLI maps this error to: 1 usage, 2 data or
    /// validation, 3 resource cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CapExceeded { .. } => 3,
            _ => 2,
        }
    }
}
