//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape once in reverse and returns gradients for every leaf that asked for
//! one.
//!
//! ```
//! use mico_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! let grads = tape.backward_scalar(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod attention;
mod error;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use attention::{AttentionBlock, AttentionLayout, AttentionMask};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error};
pub use scalar::Scalar;
pub use tape::{CustomBackward, Gradients, Tape, TapeNode, Var, BCE_EPS};
pub use tensor::Tensor;
