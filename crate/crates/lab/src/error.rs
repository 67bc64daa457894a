use std::io;
use std::path::PathBuf;

use rlrs_core::trainer::{Divergence, TrainError};

/// Failure of a lab operation, grouped by CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(Box<Divergence>),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Core(rlrs_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// 0 success, 1 configuration, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 1,
            LabError::Core(rlrs_core::Error::Config(_)) => 1,
            LabError::Diverged(_) | LabError::Core(_) => 2,
            LabError::Io { .. } => 3,
        }
    }
}

impl From<rlrs_core::Error> for LabError {
    fn from(e: rlrs_core::Error) -> Self {
        match e {
            rlrs_core::Error::Config(m) => LabError::Config(m),
            other => LabError::Core(other),
        }
    }
}

impl From<TrainError> for LabError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Failed(e) => e.into(),
            TrainError::Diverged(d) => LabError::Diverged(d),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
