use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum MdrError {
    #[error("invalid dimension id {0} (expected 0..=20)")]
    InvalidDimension(usize),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mask selects no dimensions")]
    EmptyMask,

    #[error("no labeled dimensions (sum of z is 0)")]
    NoLabeledDimensions,

    #[error("invalid preference verdict {0} (expected 1, 0 or -1)")]
    InvalidVerdict(i64),

    #[error("weights do not form a convex combination (sum = {0})")]
    NotConvex(f64),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("corrupt container at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("tape does not match the stack it is replayed against")]
    TapeMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Io,
    Numeric,
}

impl MdrError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            MdrError::Io(_) => ErrorCategory::Io,
            MdrError::NonFinite { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Validation,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        MdrError::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }
}

pub type Result<T, E = MdrError> = std::result::Result<T, E>;
