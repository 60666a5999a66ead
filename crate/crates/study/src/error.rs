use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("session has expired")]
    Expired,
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("statistics: {0}")]
    Stats(String),
    #[error("event log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("event log {path} line {line}: {detail}")]
    Replay { path: PathBuf, line: usize, detail: String },
    #[error("image encoding: {0}")]
    Image(String),
    #[error("volume library: {0}")]
    Library(String),
}

impl StudyError {
    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            StudyError::NotFound(_) => "not_found",
            StudyError::Conflict(_) => "conflict",
            StudyError::Expired => "expired",
            StudyError::Validation(_) => "validation",
            StudyError::Stats(_) => "statistics",
            StudyError::Io { .. } | StudyError::Replay { .. } => "storage",
            StudyError::Image(_) | StudyError::Library(_) => "internal",
        }
    }
}

pub type Result<T, E = StudyError> = std::result::Result<T, E>;
