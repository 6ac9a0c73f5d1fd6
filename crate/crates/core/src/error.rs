use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),

    #[error("unknown selection strategy `{0}`")]
    UnknownStrategy(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
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
