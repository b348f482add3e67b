//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod checkpoint;
pub mod gradcheck;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use nn::{
    attention, causal_transformer, linear, AttentionOutput, AttentionParams, TransformerLayer, TransformerParams,
    LAYER_NORM_EPS,
};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{init_uniform, Grads, ParamId, ParamStore};
pub use tape::{Segments, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for size {size}")]
    Index { op: &'static str, index: usize, size: usize },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("checkpoint line {line}: {detail}")]
    Checkpoint { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KernelError>;
