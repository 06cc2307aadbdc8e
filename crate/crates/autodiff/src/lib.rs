//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable value. Computations that need gradients are
//! recorded on a [`Tape`] through [`Var`] handles; [`Tape::backward`] then
//! returns the gradient of a scalar loss for every differentiable leaf.
//!
//! ```
//! use dxp_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod check;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use error::TensorError;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
