//! Numerical self-checks run by `tnaf check`.

use std::fmt;

use tnaf_core::diffcore::{Tape, Tensor};
use tnaf_core::flow::{draw_base, sample_with_noise, BaseDistribution, FlowError, FlowModel, HeadType};
use tnaf_core::linalg::log_abs_determinant;

pub const JACOBIAN_STEP: f64 = 1e-5;
pub const UPPER_TOL: f64 = 1e-8;
pub const LOGDET_TOL: f64 = 1e-6;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-4;
/// Denominator floor for gradient relative errors; sits above the
/// roundoff of central differences, which matters for exactly-zero gradients.
pub const GRADIENT_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "pass" } else { "fail" };
        write!(f, "oracle={} status={status} {}", self.name, self.detail)
    }
}

/// Standard-normal probe points in the model's input space.
pub fn probe_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = draw_base(BaseDistribution::StandardNormal, count, dim, seed);
    (0..count).map(|r| t.row(r).to_vec()).collect()
}

/// Upper triangle of the numerical Jacobian vanishes; diagonal positive.
pub fn triangularity(model: &FlowModel, points: &[Vec<f64>]) -> Result<OracleResult, FlowError> {
    let (mut worst_upper, mut min_diag) = (0.0f64, f64::INFINITY);
    for x in points {
        let jac = model.numerical_jacobian(x, JACOBIAN_STEP)?;
        for (i, row) in jac.iter().enumerate() {
            min_diag = min_diag.min(row[i]);
            for v in &row[i + 1..] {
                worst_upper = worst_upper.max(v.abs());
            }
        }
    }
    Ok(OracleResult {
        name: "triangularity",
        passed: worst_upper < UPPER_TOL && min_diag > 0.0,
        detail: format!("max_upper={worst_upper:e} min_diag={min_diag:e}"),
    })
}

/// `exp(Σ logdet)` against `|det J|` of the numerical Jacobian.
pub fn log_det(model: &FlowModel, points: &[Vec<f64>]) -> Result<OracleResult, FlowError> {
    let mut worst = 0.0f64;
    for x in points {
        let ld = model.log_prob(x)?.logdet;
        let (numeric, sign) = log_abs_determinant(&model.numerical_jacobian(x, JACOBIAN_STEP)?);
        let rel = if sign > 0.0 { (ld - numeric).exp_m1().abs() } else { f64::INFINITY };
        worst = worst.max(rel);
    }
    Ok(OracleResult {
        name: "log_det",
        passed: worst < LOGDET_TOL,
        detail: format!("max_rel_err={worst:e}"),
    })
}

fn loss(model: &FlowModel, batch: &Tensor) -> Result<f64, FlowError> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let l = model.nll_loss(&mut tape, &bound, batch)?;
    Ok(tape.value(l).item())
}

/// Tape gradient of the loss against central differences. At most
/// `max_entries` evenly strided parameter entries are probed.
pub fn gradient(model: &FlowModel, batch: &Tensor, max_entries: usize) -> Result<OracleResult, FlowError> {
    let mut work = model.clone();
    work.params.zero_grads();
    work.loss_and_grad(batch, true)?;
    let analytic = work.params.flat_grads();
    let total = analytic.len();
    let stride = total.div_ceil(max_entries.max(1)).max(1);
    let mut flat = model.params.flat_values();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut probed = 0;
    for i in (0..total).step_by(stride) {
        let orig = flat[i];
        flat[i] = orig + GRADIENT_STEP;
        probe.params.set_flat_values(&flat)?;
        let plus = loss(&probe, batch)?;
        flat[i] = orig - GRADIENT_STEP;
        probe.params.set_flat_values(&flat)?;
        let minus = loss(&probe, batch)?;
        flat[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRADIENT_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        worst = worst.max(rel);
        probed += 1;
    }
    Ok(OracleResult {
        name: "gradient",
        passed: worst < GRADIENT_TOL,
        detail: format!("max_rel_err={worst:e} entries={probed}/{total}"),
    })
}

/// Sample, push the samples forward again and compare with the noise.
pub fn inversion(model: &FlowModel, n: usize, seed: u64) -> Result<OracleResult, FlowError> {
    let (x, noise) = match sample_with_noise(model, n, seed) {
        Ok(v) => v,
        Err(e @ FlowError::Inversion { .. }) => {
            return Ok(OracleResult {
                name: "inversion",
                passed: false,
                detail: e.to_string(),
            })
        }
        Err(e) => return Err(e),
    };
    let tol = match model.head_type() {
        HeadType::Cdf | HeadType::SharedCdf => 1e-4,
        HeadType::Affine | HeadType::Spline => 1e-9,
    };
    let mut worst = 0.0f64;
    for (r, out) in model.log_prob_batch(&x)?.iter().enumerate() {
        for (i, y) in out.y.iter().enumerate() {
            worst = worst.max((y - noise.at(r, i)).abs());
        }
    }
    Ok(OracleResult {
        name: "inversion",
        passed: worst < tol,
        detail: format!("max_abs_err={worst:e} tol={tol:e}"),
    })
}

/// All four oracles with the settings used by `tnaf check`.
pub fn run_all(model: &FlowModel, seed: u64) -> Result<Vec<OracleResult>, FlowError> {
    let d = model.dim();
    let points = probe_points(d, 5, seed);
    let batch = draw_base(BaseDistribution::StandardNormal, 4, d, seed.wrapping_add(1));
    Ok(vec![
        triangularity(model, &points)?,
        log_det(model, &points)?,
        gradient(model, &batch, 400)?,
        inversion(model, 64, seed.wrapping_add(2))?,
    ])
}
