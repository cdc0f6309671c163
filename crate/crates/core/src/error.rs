use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fewer than 3 distinct depth values ({distinct} found); treat all edges as SHARED")]
    DegenerateDepths { distinct: usize },

    #[error("{stage}: non-finite loss at step {step}: {detail}")]
    NonFinite {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("missing checkpoint for stage `{stage}` at {path}")]
    MissingCheckpoint { stage: &'static str, path: PathBuf },

    #[error("model for stage `{0}` has not been trained")]
    Untrained(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {origin} line {line}: {msg}")]
    Parse {
        origin: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
