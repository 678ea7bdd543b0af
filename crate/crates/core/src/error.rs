use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("unsupported array layout: {0}")]
    UnsupportedLayout(String),
    #[error("malformed array file: {0}")]
    Format(String),
    #[error("incomparable fingerprints: embedder {0} vs {1}")]
    IncomparableFingerprints(String, String),
    #[error("no succeeded runs for task {0}; A_t = -inf")]
    NoModel(String),
    #[error("illegal run status transition for {run_id}: {from} -> {to}")]
    IllegalTransition {
        run_id: String,
        from: String,
        to: String,
    },
    #[error("every development run for task {task_id} failed; A_t unchanged: {}", reasons.join("; "))]
    DevelopmentFailed { task_id: String, reasons: Vec<String> },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("zip error: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("{0}")]
    Internal(String),
}

/// Coarse error classes used for exit codes and HTTP status mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Validation,
    Internal,
}

impl ErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::NotFound => "not_found",
            ErrorKind::Validation => "validation",
            ErrorKind::Internal => "internal",
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NotFound(_) | Error::NoModel(_) => ErrorKind::NotFound,
            Error::Tensor(_)
            | Error::Validation(_)
            | Error::UnsupportedLayout(_)
            | Error::Format(_)
            | Error::IncomparableFingerprints(..)
            | Error::IllegalTransition { .. }
            | Error::Zip(_) => ErrorKind::Validation,
            Error::NonFiniteLoss { .. }
            | Error::DevelopmentFailed { .. }
            | Error::Integrity(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Internal(_) => ErrorKind::Internal,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn not_found(msg: impl Into<String>) -> Self {
        Error::NotFound(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
