use std::path::PathBuf;

use skd_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("box corner behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    Checksum {
        what: String,
        expected: String,
        found: String,
    },
    #[error("non-finite loss at step {step} (scenes {scenes:?}): {detail}")]
    NonFiniteLoss {
        step: u64,
        scenes: Vec<usize>,
        detail: String,
    },
    #[error("unknown {kind} strategy '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    /// True for missing or unreadable files, as opposed to bad contents.
    pub fn is_missing_file(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}
