//! Differentiable operators, reverse-mode tape, Adam, and checkpoints.

mod checkpoint;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_tensors, save_checkpoint, write_tensors};
pub use params::{AdamConfig, ParamStore};
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("parameter {0} is not in the store")]
    MissingParam(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("update error: parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub use kernels::sigmoid;
