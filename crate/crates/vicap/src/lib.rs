//! Video captioning toolkit operating on precomputed video features.
//!
//! The pipeline encodes per-video feature files into a global representation
//! plus temporal and spatial memories, decodes captions with a two-layer
//! attention LSTM, trains with cross entropy and self-critical policy
//! gradients, evaluates with standard caption metrics, and fuses the two
//! attention branches by reranking candidate captions with a video-sentence
//! embedding model.

pub mod cli;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod featio;
pub mod fusion;
pub mod metrics;
pub mod train;
pub mod util;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
