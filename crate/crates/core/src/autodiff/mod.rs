//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar replays the records in reverse, accumulating
//! gradients into requires-grad leaves and into any node flagged with
//! [`Tape::retain_grad`]. A tape is single-threaded; independent tapes may
//! run on separate threads.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{central_difference, grad_check, relative_error};
pub use tape::{Tape, Var};

/// Layer normalization epsilon used by [`Tape::layer_norm`].
pub const LN_EPS: crate::Real = 1e-5;

pub use ops::{gelu, log_sum_exp, sigmoid, softmax_rows};
