//! Error type shared across the crate.

use std::path::PathBuf;

/// All failure modes surfaced by the library.
///
/// `Validation` covers bad shapes, out-of-range values, and malformed
/// structure addresses. `Ingest` is reserved for file-backed inputs and
/// always names the offending path.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("ingest: {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: u64 },

    #[error("degenerate representation: {0}")]
    DegenerateRepresentation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
