//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamSet`] and are bound onto the tape as leaves; after
//! [`Tape::backward`] their gradients are folded back with
//! [`ParamSet::accumulate_grads`].
//!
//! Broadcasting covers only scalar-vs-tensor and trailing-suffix shapes
//! (for example `[E]` against `[N, E]`).

mod params;
mod tape;
mod tensor;


pub use params::{fd_gradient, Bound, Param, ParamSet};
pub use tape::{logsumexp, sigmoid, softplus, CustomOp, Tape, Var, MASKED_THRESHOLD};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {message}")]
    Domain { op: &'static str, message: String },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
