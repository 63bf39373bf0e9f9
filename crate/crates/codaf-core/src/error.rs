use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. `exit_code` groups variants the way the CLI
/// reports them: 1 for validation problems, 2 for numerical failures.
#[derive(Debug, Error)]
pub enum CodafError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CodafError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CodafError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CodafError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CodafError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CodafError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodafError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: validation errors exit 1, numerical
    /// failures exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CodafError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CodafError>;
