use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("fully masked attention row")]
    FullyMaskedRow,

    #[error("no supervised positions")]
    NoSupervisedPositions,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("backward already ran on this tape; start a new tape")]
    BackwardTwice,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("head dimension must be even (got {0})")]
    OddHeadDim(usize),

    #[error("position {pos} out of range for table with {max} positions")]
    PositionOutOfRange { pos: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("BICO step requires maskable positions")]
    NoMaskablePositions,

    #[error("token pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("reverse ordering present in training data: {0}")]
    ReverseLeak(String),

    #[error("divergence detected at step {step}")]
    Divergence { step: usize },

    #[error("invalid token id {id} for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
