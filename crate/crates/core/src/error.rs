use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad error class, used by front ends to pick a stable exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Transport,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no signal: both embedding streams are zero for {0}")]
    NoSignal(String),

    #[error("no evidence: {0}")]
    NoEvidence(String),

    #[error("index build rejected: {0}")]
    Build(String),

    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported index format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Transport { .. } => ErrorClass::Transport,
            _ => ErrorClass::Data,
        }
    }
}
