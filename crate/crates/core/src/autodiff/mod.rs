//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as operations execute; [`Tape::backward`]
//! sweeps the record once in reverse. Parameters enter through
//! [`Tape::leaf`], which shares their buffer, and read their gradients back
//! with [`Tape::grad`].

mod attention;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use attention::{AttentionLayout, AttentionSpan};
pub use ops::LAYER_NORM_EPS;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::Fnv;

#[cfg(test)]
mod tests;
