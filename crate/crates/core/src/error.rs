use std::path::PathBuf;

use thiserror::Error;

use crate::volume::{Dims, GridKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("voxel {index} holds {value}, which is not valid for a {kind:?} grid")]
    InvalidValue {
        index: usize,
        value: f32,
        kind: GridKind,
    },

    #[error("value array has {found} entries but dims {dims} require {expected}")]
    LengthMismatch {
        dims: Dims,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimsMismatch { left: Dims, right: Dims },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
