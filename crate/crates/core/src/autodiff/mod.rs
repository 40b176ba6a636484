//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every learnable computation in the pipeline is expressed as a sequence of
//! [`Tape`] operations on [`Tensor`] handles. A tape records one forward pass
//! and is swept backward exactly once; the pipeline builds a fresh tape per
//! training step because the graph depends on the overlap masks.
//!
//! Shapes are never broadcast implicitly. Use [`Tape::repeat_rows`] and
//! [`Tape::repeat_cols`] to expand vectors explicitly.

mod check;
mod matrix;
mod tape;

pub use check::{finite_difference_check, finite_difference_check_on, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{
    Axis, BinaryOp, ContrastiveAnchor, Fault, Gradients, ReduceKind, Tape, Tensor, UnaryOp,
};

#[cfg(test)]
use tape::so3_exp_jacobian;
