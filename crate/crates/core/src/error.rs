use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A pipeline stage was invoked before the artifacts it depends on exist.
    #[error("not ready: missing {stage}")]
    NotReady { stage: String },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("divergence in {phase} at step {step}: loss is not finite")]
    Divergence { phase: String, step: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI surface: config/validation failures are 1,
    /// missing dependency artifacts are 3. Usage errors (exit 2) are handled by
    /// the argument parser itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotReady { .. } => 3,
            _ => 1,
        }
    }
}
