//! Tape graphs for each transform head. All functions work on `M = N·D`
//! flattened positions; `hidden` is `[M, E]` and `xs` is `[M]`.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{mix_name, FlowConfig, FlowError, HeadType};
use crate::conditioner::project_head;
use crate::diffcore::{Bound, DiffError, ParamSet, Tape, Tensor, Var};
use crate::transforms::{spline_psi_dim, spline_tape, SharedCdfPhi};

pub(crate) const PHI_W1: &str = "phi.w1";
pub(crate) const PHI_B1: &str = "phi.b1";
pub(crate) const PHI_W2: &str = "phi.w2";
pub(crate) const PHI_B2: &str = "phi.b2";
pub(crate) const PHI_W1_HAT: &str = "phi.w1_hat";
pub(crate) const PHI_W2_HAT: &str = "phi.w2_hat";

/// Initial `Σ exp(w2)`: the CDF image starts as `(σ(−5), σ(5))`.
const INIT_OUTPUT_SCALE: f64 = 5.0;

/// Raw output weight giving `Σ_k exp(w2_k) = INIT_OUTPUT_SCALE`.
pub(crate) fn output_weight_init(hidden: usize) -> f64 {
    (INIT_OUTPUT_SCALE / hidden as f64).ln()
}

/// Hidden biases evenly spread over `[−2, 2]`.
pub(crate) fn hidden_bias_spread(hidden: usize) -> Vec<f64> {
    if hidden == 1 {
        return vec![0.0];
    }
    (0..hidden).map(|k| -2.0 + 4.0 * k as f64 / (hidden - 1) as f64).collect()
}

pub(crate) fn init_shared_phi(cfg: &FlowConfig, rng: &mut impl Rng, params: &mut ParamSet) -> Result<(), DiffError> {
    let (h, e) = (cfg.cdf_hidden, cfg.embed);
    let bound = 1.0 / (e as f64).sqrt();
    let cond = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let mut draw = |n: usize, dist: &Uniform<f64>| -> Vec<f64> { (0..n).map(|_| dist.sample(rng)).collect() };
    params.insert(PHI_W1, Tensor::zeros(&[h]))?;
    params.insert(PHI_B1, Tensor::vector(hidden_bias_spread(h)))?;
    params.insert(PHI_W2, Tensor::full(&[h], output_weight_init(h)))?;
    params.insert(PHI_B2, Tensor::zeros(&[1]))?;
    params.insert(PHI_W1_HAT, Tensor::new(&[e, h], draw(e * h, &cond))?)?;
    params.insert(PHI_W2_HAT, Tensor::new(&[e, 1], draw(e, &cond))?)?;
    Ok(())
}

/// Current shared CDF weights as plain values.
pub(crate) fn shared_phi(params: &ParamSet) -> SharedCdfPhi {
    let v = |name: &str| params.value(name).data().to_vec();
    SharedCdfPhi {
        w1: v(PHI_W1),
        b1: v(PHI_B1),
        w2: v(PHI_W2),
        b2: params.value(PHI_B2).item(),
        w1_hat: v(PHI_W1_HAT),
        w2_hat: v(PHI_W2_HAT),
    }
}

fn column(tape: &mut Tape, psi: Var, start: usize, end: usize) -> Result<Var, DiffError> {
    let m = tape.shape(psi)[0];
    let c = tape.slice_last(psi, start, end)?;
    if end - start == 1 {
        tape.reshape(c, &[m])
    } else {
        Ok(c)
    }
}

/// `log σ'(u) = −softplus(−u) − softplus(u)`.
fn log_sigmoid_prime(tape: &mut Tape, u: Var) -> Result<Var, DiffError> {
    let nu = tape.neg(u)?;
    let a = tape.softplus(nu)?;
    let b = tape.softplus(u)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

/// `log(1 − tanh²(a)) = 2(log 2 − a − softplus(−2a))`.
fn log_sech2(tape: &mut Tape, a: Var) -> Result<Var, DiffError> {
    let m2a = tape.scale(a, -2.0)?;
    let sp = tape.softplus(m2a)?;
    let s = tape.add(a, sp)?;
    let s = tape.scale(s, -2.0)?;
    let c = tape.constant(Tensor::scalar(2.0 * LN_2));
    tape.add(s, c)
}

/// Shared tail of both CDF heads given pre-activations `a [M,H]`,
/// output pre-activation `u [M]` and the raw weight sum `w1 + w2`.
fn cdf_output(tape: &mut Tape, a: Var, u: Var, w_sum: Var) -> Result<(Var, Var), DiffError> {
    let y = tape.sigmoid(u)?;
    let ls = log_sech2(tape, a)?;
    let terms = tape.add(ls, w_sum)?;
    let lse = tape.logsumexp_last(terms)?;
    let lsp = log_sigmoid_prime(tape, u)?;
    let ld = tape.add(lsp, lse)?;
    Ok((y, ld))
}

fn affine(tape: &mut Tape, psi: Var, xs: Var) -> Result<(Var, Var), DiffError> {
    let mu = column(tape, psi, 0, 1)?;
    let log_sigma = column(tape, psi, 1, 2)?;
    let sigma = tape.exp(log_sigma)?;
    let scaled = tape.mul(sigma, xs)?;
    let y = tape.add(mu, scaled)?;
    Ok((y, log_sigma))
}

fn cdf(tape: &mut Tape, psi: Var, xs: Var, hidden: usize) -> Result<(Var, Var), DiffError> {
    let w1 = column(tape, psi, 0, hidden)?;
    let b1 = column(tape, psi, hidden, 2 * hidden)?;
    let w2 = column(tape, psi, 2 * hidden, 3 * hidden)?;
    let b2 = column(tape, psi, 3 * hidden, 3 * hidden + 1)?;
    let ew1 = tape.exp(w1)?;
    let a = tape.scale_rows(ew1, xs)?;
    let a = tape.add(a, b1)?;
    let t = tape.tanh(a)?;
    let ew2 = tape.exp(w2)?;
    let prod = tape.mul(t, ew2)?;
    let u = tape.sum_last(prod)?;
    let u = tape.add(u, b2)?;
    let w_sum = tape.add(w1, w2)?;
    cdf_output(tape, a, u, w_sum)
}

fn shared_cdf(tape: &mut Tape, bound: &Bound, hidden: Var, xs: Var, h: usize) -> Result<(Var, Var), DiffError> {
    let m = tape.shape(xs)[0];
    let (w1, b1, w2, b2) = (bound.get(PHI_W1), bound.get(PHI_B1), bound.get(PHI_W2), bound.get(PHI_B2));
    let xcol = tape.reshape(xs, &[m, 1])?;
    let ew1 = tape.exp(w1)?;
    let ew1 = tape.reshape(ew1, &[1, h])?;
    let a = tape.matmul(xcol, ew1)?;
    let cond = tape.matmul(hidden, bound.get(PHI_W1_HAT))?;
    let a = tape.add(a, cond)?;
    let a = tape.add(a, b1)?;
    let t = tape.tanh(a)?;
    let ew2 = tape.exp(w2)?;
    let ew2 = tape.reshape(ew2, &[h, 1])?;
    let u = tape.matmul(t, ew2)?;
    let cond = tape.matmul(hidden, bound.get(PHI_W2_HAT))?;
    let u = tape.add(u, cond)?;
    let u = tape.reshape(u, &[m])?;
    let u = tape.add(u, b2)?;
    let w_sum = tape.add(w1, w2)?;
    cdf_output(tape, a, u, w_sum)
}

fn spline_stack(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &FlowConfig,
    hidden: Var,
    xs: Var,
    n: usize,
) -> Result<(Var, Var), DiffError> {
    let cond = cfg.conditioner();
    let (d, k, b) = (cfg.dim, cfg.spline_bins, cfg.spline_bound);
    let p = spline_psi_dim(k);
    let mut z = xs;
    let mut total: Option<Var> = None;
    for j in 0..cfg.spline_blocks {
        let psi = project_head(tape, bound, &cond, hidden, j)?;
        debug_assert_eq!(tape.shape(psi)[1], p);
        let out = spline_tape(tape, z, psi, k, b)?;
        let s = column(tape, out, 0, 1)?;
        let ld = column(tape, out, 1, 2)?;
        total = Some(match total {
            Some(t) => tape.add(t, ld)?,
            None => ld,
        });
        z = if d > 1 {
            // Rows are samples: z'ᵀ = sᵀ Lᵀ.
            let rows = tape.reshape(s, &[n, d])?;
            let lt = tape.unit_lower_t(bound.get(&mix_name(j)), d)?;
            let mixed = tape.matmul(rows, lt)?;
            tape.reshape(mixed, &[n * d])?
        } else {
            s
        };
    }
    Ok((z, total.expect("at least one block")))
}

/// `(y [M], logdet [M])` for every position.
pub(crate) fn transform(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &FlowConfig,
    hidden: Var,
    xs: Var,
    n: usize,
) -> Result<(Var, Var), FlowError> {
    let cond = cfg.conditioner();
    let out = match cfg.head_type {
        HeadType::Affine => {
            let psi = project_head(tape, bound, &cond, hidden, 0)?;
            affine(tape, psi, xs)?
        }
        HeadType::Cdf => {
            let psi = project_head(tape, bound, &cond, hidden, 0)?;
            cdf(tape, psi, xs, cfg.cdf_hidden)?
        }
        HeadType::SharedCdf => shared_cdf(tape, bound, hidden, xs, cfg.cdf_hidden)?,
        HeadType::Spline => spline_stack(tape, bound, cfg, hidden, xs, n)?,
    };
    Ok(out)
}
