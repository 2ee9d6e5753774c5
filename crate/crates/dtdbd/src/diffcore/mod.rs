//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] records operations as they execute (define-by-run) and
//! replays them backwards to accumulate exact gradients for every named
//! parameter reachable from a scalar loss. The op set is exactly what the
//! encoders and losses in this crate need; there is no broadcasting beyond
//! row-vector bias addition and no implicit type promotion. Replay order
//! is the reverse of recording order, so gradients are bit-identical
//! across runs of the same graph.

pub(crate) mod check;
mod tape;
mod tensor;

pub use check::finite_diff_grad;
pub use tape::{Tape, Var};
pub use tensor::{log_softmax_rows_data, pairwise_sq_dist_data, softmax_rows_data, Tensor};
