//! Scenes on disk, procedural test scenes, Gaussian PLY files and the
//! `hgs` command line.

pub mod checks;
pub mod cli;
pub mod image_io;
pub mod ply;
pub mod scene;
pub mod synth;

use std::path::PathBuf;

use hgs_autodiff::TensorError;
use hgs_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum WorkbenchError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("scene: {0}")]
    Scene(String),
    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

impl WorkbenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status: 1 for usage errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;
