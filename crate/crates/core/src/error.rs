use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown class '{name}' (catalogue: {catalogue})")]
    UnknownClass { name: String, catalogue: String },

    #[error("{kind} defect on '{class}' seed {seed} stayed empty after {attempts} attempts")]
    DegenerateDefect {
        class: String,
        kind: String,
        seed: u64,
        attempts: usize,
    },

    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical abort at step {step} (synthesis seed {seed}): {reason}")]
    Numerical {
        step: usize,
        seed: u64,
        reason: String,
    },

    #[error(
        "AUROC needs both classes in the pixel pool ({positives} positive, {negatives} negative)"
    )]
    SingleClassPool { positives: usize, negatives: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line entry point.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            Error::Tensor(TensorError::NonPositiveLog { .. }) => 3,
            _ => 2,
        }
    }
}
