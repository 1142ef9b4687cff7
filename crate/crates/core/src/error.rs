use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("batch of size {0} is degenerate for batch statistics")]
    DegenerateBatch(usize),

    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquareCost { rows: usize, cols: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("network parameters are not initialized")]
    Uninitialized,

    #[error("all training runs failed")]
    AllRunsFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
