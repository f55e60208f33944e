use thiserror::Error;

/// Errors raised by the training engine and its kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("reduction length {k} exceeds the i32 accumulation bound {max}")]
    AccumulationOverflow { k: usize, max: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("invalid quantization parameters: {0}")]
    QuantParams(String),

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
