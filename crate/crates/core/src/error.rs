use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty after trimming")]
    EmptyInput,
    #[error("corpus contains no usable lines")]
    EmptyCorpus,
    #[error("sequence needs {required} positions but the limit is {limit}")]
    SequenceTooLong { required: usize, limit: usize },
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    VocabOverflow { id: usize, vocab_size: usize },
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeError {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("forward trace does not match the model or inputs it is used with")]
    TraceMismatch,
    #[error("hessian diagonal estimate is not finite")]
    HessianEstimateFailed,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("empty sequence passed to a metric")]
    EmptySequence,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed data at line {line}: {message}")]
    MalformedData { line: usize, message: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    ) -> Self {
        Error::ShapeError {
            context,
            expected,
            actual,
        }
    }
}
