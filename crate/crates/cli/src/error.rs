use std::path::PathBuf;

use thiserror::Error;

pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const MALFORMED: i32 = 4;
    pub const SCHEMA: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lampat::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use lampat::Error as E;
        match self {
            CliError::Core(E::DivergenceDetected { .. }) => exit::DIVERGENCE,
            CliError::Core(E::MalformedData { .. }) => exit::MALFORMED,
            CliError::Core(E::VersionMismatch { .. } | E::MalformedCheckpoint(_)) => exit::SCHEMA,
            CliError::Schema(_) => exit::SCHEMA,
            _ => exit::INPUT,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
