//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FpsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}{}", ctx_suffix(.context))]
    ShapeMismatch {
        expected: String,
        got: String,
        context: String,
    },

    #[error("index ({i}, {j}) out of range for {height}x{width}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        height: usize,
        width: usize,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("identifiability error: {0}")]
    Identifiability(String),

    #[error("gradient scheme error: {0}")]
    Scheme(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("training diverged: non-finite value in {term}")]
    Divergence { term: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn ctx_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl FpsError {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        FpsError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context: String::new(),
        }
    }

    pub fn shape_in(
        expected: impl Into<String>,
        got: impl Into<String>,
        context: impl Into<String>,
    ) -> Self {
        FpsError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context: context.into(),
        }
    }

    /// Attach scale/block context to an error bubbling out of a submodule.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            FpsError::ShapeMismatch { expected, got, context: old } => {
                let context = if old.is_empty() {
                    context.to_string()
                } else {
                    format!("{context}: {old}")
                };
                FpsError::ShapeMismatch { expected, got, context }
            }
            FpsError::InvalidInput(msg) => FpsError::InvalidInput(format!("{context}: {msg}")),
            FpsError::State(msg) => FpsError::State(format!("{context}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, FpsError>;
