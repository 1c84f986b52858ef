//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine records ops on a [`Tape`] while the forward pass runs and
//! produces [`Gradients`] with a single reverse sweep. It supports exactly
//! the layer set the image-synthesis networks need (convolutions, linear
//! layers, normalisation, resampling, pooling and the usual pointwise
//! activations) in `f32` or `f64`.

pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use real::{gemm, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
