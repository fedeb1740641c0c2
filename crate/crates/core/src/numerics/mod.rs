//! Dense `f64` tensors, reverse-mode differentiation, transformer building
//! blocks and the Adam optimizer.

mod gradcheck;
pub mod layers;
mod optim;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, GradCheckReport};
pub use layers::{
    DecoderBlock, EncoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
};
pub use optim::{adam_step, Adam, AdamConfig, AdamState, Parameter};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::{
    cross_entropy, gelu, gelu_scalar, layer_norm, masked_softmax, matmul, permute, Tensor,
    LAYER_NORM_EPS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no valid position")]
    FullyMasked { row: usize },
    #[error("all {0} targets are ignored")]
    AllIgnored(usize),
    #[error("target class {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
