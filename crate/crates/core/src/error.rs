use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite depth")]
    NonFiniteDepth,

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("non-positive depth {value} at pixel {index}")]
    NonPositiveDepth { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch: {batch_ids:?})")]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
