use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("backward already ran on this graph; build a fresh graph per step")]
    BackwardTwice,

    #[error("backward requires a scalar loss of shape [1], got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward requires a loss recorded on this graph")]
    LossNotRecorded,

    #[error("optimizer state holds {state} slots but the store has {params} parameters")]
    OptimizerMismatch { state: usize, params: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("pretraining diverged with a non-finite loss at epoch {epoch}, batch {batch}")]
    PretrainDiverged { epoch: usize, batch: usize },

    #[error("stream exhausted: each sample can be visited once")]
    StreamExhausted,

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
