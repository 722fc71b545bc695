use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pipeline, file formats and CLI.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed {kind} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        kind: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{stage} diverged at step {step}: {reason}")]
    Diverged {
        stage: &'static str,
        step: usize,
        reason: String,
    },
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] sgan_core::Error),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Core(sgan_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Json { path, source }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
