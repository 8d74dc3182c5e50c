use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerical(#[from] ngvi::Error),
}

impl BenchError {
    /// Process exit code: 2 for configuration and input problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Numerical(e) => match e {
                ngvi::Error::InvalidParameter(_)
                | ngvi::Error::UnsupportedObservation { .. }
                | ngvi::Error::InvalidShape(_)
                | ngvi::Error::BracketInvalid { .. } => 2,
                _ => 3,
            },
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
