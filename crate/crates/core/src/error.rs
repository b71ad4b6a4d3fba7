use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid token id {id} (vocabulary size {size})")]
    InvalidToken { id: u32, size: u32 },

    #[error("cannot encode character {ch:?} at position {position}")]
    Encoding { ch: char, position: usize },

    #[error("infeasible k: {k} centroids requested but only {distinct} distinct vectors")]
    InfeasibleK { k: usize, distinct: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checksum error: {0}")]
    Checksum(String),

    #[error("empty loss: no unmasked target positions")]
    EmptyLoss,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty training mix")]
    EmptyMix,

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
