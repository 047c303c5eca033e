use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsdError {
    /// A caller broke a documented precondition (shapes, ids, channel counts).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at step {step} on scene {scene_id}: {detail}")]
    NonFinite {
        step: usize,
        scene_id: String,
        detail: String,
    },

    #[error("capacity exceeded: {0}")]
    Capacity(String),
}

impl FsdError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FsdError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        FsdError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
