use std::path::PathBuf;

use bcomm_grad::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("environment fault: {0}")]
    Env(String),

    #[error("training diverged: {reason}\n{dump}")]
    Diverged { reason: String, dump: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
