//! Crate-wide error type and exit-code mapping for the CLI.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or model shapes do not line up.
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: String,
        left: String,
        right: String,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error in {op}: {message}")]
    Numeric { op: String, message: String },

    /// A caller violated an operation's contract (wrong rank, empty batch, ...).
    #[error("contract violation in {op}: {message}")]
    Contract { op: String, message: String },

    /// Bad user-supplied configuration (flags, config file values).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A metric has no defined value on this input (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// File does not match the expected format (magic, version, header).
    #[error("{}: format error: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// File matched the format but its payload is inconsistent or truncated.
    #[error("{}: corrupt file: {message}", path.display())]
    Corruption { path: PathBuf, message: String },

    /// Loaded data failed validation (NaN values, bad labels, ragged rows).
    #[error("validation error: {0}")]
    Validation(String),

    /// A similarity matrix violated symmetry or range requirements.
    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),

    /// Data too degenerate to operate on (e.g. a split with one class).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    IoAt {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(op: &str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn numeric(op: &str, message: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.to_string(),
            message: message.into(),
        }
    }

    pub fn contract(op: &str, message: impl Into<String>) -> Self {
        Error::Contract {
            op: op.to_string(),
            message: message.into(),
        }
    }

    /// Stable process exit codes: 0 ok, 2 usage, 3 dimension, 4 degenerate
    /// data, 5 invalid matrix, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dimension { .. } => 3,
            Error::DegenerateData(_) | Error::UndefinedMetric(_) => 4,
            Error::InvalidMatrix(_) => 5,
            _ => 1,
        }
    }
}

/// Render a shape like `[2, 3]` for error messages.
pub fn shape_string(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}
