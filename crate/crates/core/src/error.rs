use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but found {found}")]
    ShapeMismatch { op: &'static str, expected: String, found: String },
    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("odd spatial dimension {height}x{width}; the Haar transform needs even sizes")]
    OddDimension { height: usize, width: usize },
    #[error("channel count {channels} is not divisible by 4")]
    ChannelsNotDivisible { channels: usize },
    #[error("spatial size {height}x{width} is not divisible by 2^{levels}")]
    NotDivisible { height: usize, width: usize, levels: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("roi: {0}")]
    Roi(String),
    #[error("format: {0}")]
    Format(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
