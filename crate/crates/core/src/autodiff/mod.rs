//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is a
//! topological order by construction. [`Tape::backward`] walks the tape once in
//! reverse and returns the gradient of a scalar output with respect to every
//! leaf that was created with [`Tape::param`].
//!
//! ```
//! use rlrs_core::autodiff::{Tape, Tensor};
//!
//! let x = Tensor::from_vec(vec![3.0]);
//! let mut tape = Tape::new();
//! let v = tape.param(&x);
//! let sq = tape.mul(v, v).unwrap();
//! let y = tape.reduce_sum(sq);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(v).unwrap().data(), &[6.0]);
//! ```

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
