//! A small reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! output value; [`Tape::backward`] then sweeps the record in reverse and
//! returns a gradient for every node that depends on a trainable leaf.
//! Only the operations the recogniser needs are provided.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{col2im_add, im2col};
pub use scalar::Scalar;
pub use tape::{BatchNormMode, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use scalar::{gemm, MatView};
