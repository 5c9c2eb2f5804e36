//! Reverse-mode autodiff over dense `f64` tensors, with the handful of
//! operations convolutional image-to-image networks need: convolutions,
//! transposed convolutions, instance normalization, reflection padding,
//! activations and reductions. Custom operations can be recorded through
//! [`Tape::custom`].

mod gemm;
pub mod io;
pub mod layers;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use gemm::{matmul, MatRef, Precision};
pub use layers::{Conv2d, ConvTranspose2d};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamSet};
pub use tape::{BackwardFn, Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
