//! Invertible per-dimension transforms and the lower-triangular mixing used
//! between spline blocks. Every forward map returns `(y, log |dy/dx|)`.

mod affine;
mod cdf;
mod mix;
pub(crate) mod real;
mod spline;

pub use affine::{affine_fwd, affine_inv, AffinePsi};
pub use cdf::{
    bisect_increasing, cdf_fwd, cdf_inv, cdf_psi_dim, cdf_value, log_sech2, log_sigmoid_prime, shared_cdf_fwd,
    shared_cdf_inv, CdfPsi, SharedCdfPhi, MAX_DOUBLINGS,
};
pub use mix::{mix_entry_count, mix_fwd, mix_inv, LowerMixL};
pub use spline::{
    identity_raw_derivative, spline_activate, spline_fwd, spline_inv, spline_psi_dim, spline_tape, SplineKnots,
    SplinePsi, MIN_BIN, MIN_DERIVATIVE,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("inversion failed: no bracket found for target {y}")]
    BracketNotFound { y: f64 },
    #[error("internal invariant violated: spline inverse has no root in [0, 1] for {y}")]
    NoRoot { y: f64 },
}
