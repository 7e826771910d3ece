use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("undefined orientation: ({sin}, {cos}) has near-zero norm")]
    UndefinedOrientation { sin: f64, cos: f64 },

    #[error("empty region")]
    EmptyRegion,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty neighbor set")]
    EmptyNeighbors,

    #[error("zero-area proposal")]
    ZeroAreaProposal,

    #[error("empty word")]
    EmptyWord,

    #[error("no glyph for character(s) {0:?}")]
    MissingGlyph(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible checkpoint: expected config hash {expected}, found {found}")]
    IncompatibleCheckpoint { expected: String, found: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
