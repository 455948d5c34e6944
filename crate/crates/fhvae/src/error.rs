//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation precondition (shape mismatch,
    /// non-finite input, out-of-range index).
    #[error("input contract: {0}")]
    InputContract(String),

    /// Dataset-level problem (utterance too short, missing label, unknown id).
    #[error("data: {0}")]
    Data(String),

    /// A non-finite value appeared mid-computation; `term` names the
    /// offending quantity.
    #[error("numeric: non-finite {term}: {detail}")]
    Numeric { term: &'static str, detail: String },

    /// Malformed on-disk input. `offset` is the byte position at which the
    /// problem was detected.
    #[error("format: {detail} (byte offset {offset})")]
    Format { offset: u64, detail: String },

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// Operation requires a different model mode (FHVAE vs VAE).
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
