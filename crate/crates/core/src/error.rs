use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SerError> = std::result::Result<T, E>;

/// Failure categories. Each maps to one CLI exit code (see [`SerError::kind`]).
#[derive(Debug, Error)]
pub enum SerError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NumericOverflow { node: usize, op: &'static str },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate length: {0}")]
    DegenerateLength(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incompatible tensor '{tensor}': {detail}")]
    Incompatible { tensor: String, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<SerError>,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl SerError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            SerError::Config(_) | SerError::Incompatible { .. } | SerError::ShapeMismatch { .. } => ErrorKind::Config,
            SerError::NumericOverflow { .. } | SerError::NonFinite { .. } => ErrorKind::Numeric,
            SerError::AtStep { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SerError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        SerError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
