use crfgan_core::data::DataError;
use crfgan_core::metrics::MetricsError;
use crfgan_core::training::TrainError;
use crfgan_core::TensorError;
use crfgan_study::StudyError;
use serde::Serialize;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Internal,
    Usage,
    Config,
    MissingInput,
    Data,
    Training,
    Service,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::MissingInput => 4,
            ErrorKind::Data => 5,
            ErrorKind::Training => 6,
            ErrorKind::Service => 7,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, m)
    }

    pub fn missing(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::MissingInput, m)
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, m)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound {
            ErrorKind::MissingInput
        } else {
            ErrorKind::Internal
        };
        Self::new(kind, format!("{}: {e}", path.display()))
    }

    /// One-line JSON suitable for log scrapers and CI.
    pub fn to_line(&self) -> String {
        let message = self.message.replace(['\n', '\r'], " ");
        serde_json::json!({
            "error": { "kind": self.kind, "exit_code": self.kind.exit_code(), "message": message.trim() }
        })
        .to_string()
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match &e {
            DataError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::MissingInput,
            DataError::Spec(_) | DataError::Invalid(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Step(_) => ErrorKind::Training,
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::Checkpoint(_) => ErrorKind::Data,
            TrainError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ErrorKind::MissingInput,
            _ => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let kind = match e {
            TensorError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let kind = match e {
            MetricsError::InsufficientSamples { .. } | MetricsError::InvalidBandwidth(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        let kind = match &e {
            StudyError::Validation(_) => ErrorKind::Config,
            StudyError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::MissingInput,
            StudyError::NotFound(_) => ErrorKind::MissingInput,
            StudyError::Library(_) | StudyError::Replay { .. } => ErrorKind::Data,
            _ => ErrorKind::Service,
        };
        Self::new(kind, e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
