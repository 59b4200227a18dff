//! Dense f64 tensors, numerically stable primitives, and a reverse-mode
//! gradient tape.
//!
//! Design points that the rest of the crate relies on:
//!
//! * every value is an f64 [`Tensor`] with row-major storage;
//! * the tape records a fixed, small set of primitives (matrix-vector
//!   product, elementwise add, scaling, tanh, mean-pooling, softmax,
//!   log-softmax, log, row gather, element select, dot product, scalar
//!   stack, log-sum-exp), each with a hand-derived adjoint;
//! * gradient accumulation is additive, so reusing a value several times
//!   in one graph is safe;
//! * [`finite_diff_gradient`] is the independent oracle the gradient tests
//!   compare against.

mod ops;
mod tape;
mod tensor;

pub(crate) use ops::{log_softmax_slice, lse_slice, matvec_slice, softmax_slice};
pub use ops::{finite_diff_gradient, log_sum_exp, softmax_stable};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;
