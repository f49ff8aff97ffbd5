use std::io;

use thiserror::Error;

/// Errors surfaced by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    /// A configuration value violates a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// The requested operation is not defined for this task kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The request would exceed a documented resource bound.
    #[error("resource limit: {0}")]
    Resource(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("numeric fault at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("checkpoint error in field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        LabError::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        LabError::Checkpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
