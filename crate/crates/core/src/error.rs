use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown concept id {id} (vocabulary has {size} concepts)")]
    UnknownConcept { id: usize, size: usize },

    #[error("timestep {t} out of range [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },

    #[error("overlap ratio undefined: both attention maps are zero")]
    DegenerateMaps,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
