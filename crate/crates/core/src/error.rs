use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate batch in {op}: per-channel extent {extent} is too small for batch statistics")]
    DegenerateBatch { op: &'static str, extent: usize },

    #[error("checkpoint incompatible at `{layer}`: {reason}")]
    CheckpointIncompatible { layer: String, reason: String },

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("truncated weight blob {path}: tensor `{tensor}` needs bytes up to {needed}, blob has {actual}")]
    TruncatedBlob {
        path: PathBuf,
        tensor: String,
        needed: u64,
        actual: u64,
    },

    #[error("{kind} in {path}: {reason}")]
    Parse {
        path: PathBuf,
        kind: ParseFailure,
        reason: String,
    },

    #[error("structural error at `{layer}`: {reason}")]
    Structural { layer: String, reason: String },

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseFailure {
    BadMagic,
    Truncated,
    CountMismatch,
    BadRecordSize,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParseFailure::BadMagic => "wrong magic number",
            ParseFailure::Truncated => "truncated payload",
            ParseFailure::CountMismatch => "item count mismatch",
            ParseFailure::BadRecordSize => "size is not a whole number of records",
        })
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
