use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HrtError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] hrt_core::Error),
    #[error("gradient check failed: max relative error {max_relative_error:e} exceeds {tolerance:e}")]
    GradCheckFailed { max_relative_error: f64, tolerance: f64 },
}

pub type Result<T, E = HrtError> = std::result::Result<T, E>;

impl HrtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HrtError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HrtError::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HrtError::Core(e) if e.is_numeric() => 2,
            HrtError::GradCheckFailed { .. } => 2,
            _ => 1,
        }
    }
}
