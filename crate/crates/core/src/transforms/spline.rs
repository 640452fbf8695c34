//! Monotonic rational-quadratic spline on `[-B, B]` with identity tails.

use super::real::{Dual, Real};
use super::TransformError;
use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};

/// Smallest normalized bin width/height before scaling to `2B`.
pub const MIN_BIN: f64 = 1e-3;
/// Added to every interior knot derivative.
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Unconstrained spline parameters for one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SplinePsi {
    pub raw_widths: Vec<f64>,
    pub raw_heights: Vec<f64>,
    pub raw_derivs: Vec<f64>,
    pub bound: f64,
}

/// Activated knots: `xs`, `ys` and `derivs` all hold `K + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineKnots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub derivs: Vec<f64>,
}

/// Width of the pseudo-parameter vector for `bins` bins.
pub fn spline_psi_dim(bins: usize) -> usize {
    3 * bins - 1
}

impl SplinePsi {
    /// Split a `3K − 1` slice laid out as widths, heights, interior derivatives.
    pub fn from_slice(psi: &[f64], bins: usize, bound: f64) -> Self {
        assert_eq!(psi.len(), spline_psi_dim(bins), "spline psi length");
        Self {
            raw_widths: psi[..bins].to_vec(),
            raw_heights: psi[bins..2 * bins].to_vec(),
            raw_derivs: psi[2 * bins..].to_vec(),
            bound,
        }
    }

    /// Raw values whose activation is the identity map.
    pub fn identity(bins: usize, bound: f64) -> Self {
        Self {
            raw_widths: vec![0.0; bins],
            raw_heights: vec![0.0; bins],
            raw_derivs: vec![identity_raw_derivative(); bins - 1],
            bound,
        }
    }

    pub fn bins(&self) -> usize {
        self.raw_widths.len()
    }

    fn raw(&self) -> Vec<f64> {
        let mut v = self.raw_widths.clone();
        v.extend_from_slice(&self.raw_heights);
        v.extend_from_slice(&self.raw_derivs);
        v
    }
}

/// Raw derivative value `r` with `softplus(r) + MIN_DERIVATIVE == 1`.
pub fn identity_raw_derivative() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

struct Knots<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    ds: Vec<T>,
}

fn bin_sizes<T: Real>(raw: &[T], bound: f64) -> Vec<T> {
    let k = raw.len();
    let max = raw.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = raw.iter().map(|&v| (v - T::cst(max)).exp()).collect();
    let total = exps.iter().fold(T::cst(0.0), |a, &b| a + b);
    let scale = 1.0 - MIN_BIN * k as f64;
    exps.into_iter()
        .map(|e| (T::cst(MIN_BIN) + T::cst(scale) * e / total) * T::cst(2.0 * bound))
        .collect()
}

fn cumulative<T: Real>(sizes: &[T], bound: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = T::cst(-bound);
    out.push(acc);
    for &s in &sizes[..sizes.len() - 1] {
        acc = acc + s;
        out.push(acc);
    }
    out.push(T::cst(bound));
    out
}

/// `raw` holds `[widths K, heights K, interior derivatives K−1]`.
fn activate<T: Real>(raw: &[T], bins: usize, bound: f64) -> Knots<T> {
    let xs = cumulative(&bin_sizes(&raw[..bins], bound), bound);
    let ys = cumulative(&bin_sizes(&raw[bins..2 * bins], bound), bound);
    let mut ds = Vec::with_capacity(bins + 1);
    ds.push(T::cst(1.0));
    for &r in &raw[2 * bins..] {
        ds.push(r.softplus() + T::cst(MIN_DERIVATIVE));
    }
    ds.push(T::cst(1.0));
    Knots { xs, ys, ds }
}

/// Bin index `k` with `knots[k] <= v < knots[k + 1]`, clamped to valid bins.
fn locate(knots: &[f64], v: f64) -> usize {
    let bins = knots.len() - 1;
    knots[1..bins].partition_point(|&k| k <= v)
}

fn eval<T: Real>(x: T, raw: &[T], bins: usize, bound: f64) -> (T, T) {
    if x.re().abs() >= bound {
        return (x, T::cst(0.0));
    }
    let kn = activate(raw, bins, bound);
    let xs_re: Vec<f64> = kn.xs.iter().map(|v| v.re()).collect();
    let k = locate(&xs_re, x.re());
    let w = kn.xs[k + 1] - kn.xs[k];
    let h = kn.ys[k + 1] - kn.ys[k];
    let s = h / w;
    let (d0, d1) = (kn.ds[k], kn.ds[k + 1]);
    let theta = (x - kn.xs[k]) / w;
    let one = T::cst(1.0);
    let tt = theta * (one - theta);
    let den = s + (d1 + d0 - T::cst(2.0) * s) * tt;
    let num = h * (s * theta * theta + d0 * tt);
    let y = kn.ys[k] + num / den;
    let dnum = s * s * (d1 * theta * theta + T::cst(2.0) * s * tt + d0 * (one - theta) * (one - theta));
    let logdet = dnum.ln() - T::cst(2.0) * den.ln();
    (y, logdet)
}

pub fn spline_activate(psi: &SplinePsi) -> SplineKnots {
    let kn = activate(&psi.raw(), psi.bins(), psi.bound);
    SplineKnots {
        xs: kn.xs,
        ys: kn.ys,
        derivs: kn.ds,
    }
}

/// Forward map and `log dy/dx`.
pub fn spline_fwd(x: f64, psi: &SplinePsi) -> (f64, f64) {
    eval(x, &psi.raw(), psi.bins(), psi.bound)
}

pub fn spline_inv(y: f64, psi: &SplinePsi) -> Result<f64, TransformError> {
    let bound = psi.bound;
    if y.abs() >= bound {
        return Ok(y);
    }
    let kn = spline_activate(psi);
    let k = locate(&kn.ys, y);
    let w = kn.xs[k + 1] - kn.xs[k];
    let h = kn.ys[k + 1] - kn.ys[k];
    let s = h / w;
    let (d0, d1) = (kn.derivs[k], kn.derivs[k + 1]);
    let dy = y - kn.ys[k];
    let c0 = d1 + d0 - 2.0 * s;
    let a = h * (s - d0) + dy * c0;
    let b = h * d0 - dy * c0;
    let c = -s * dy;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(TransformError::NoRoot { y });
    }
    let theta = (2.0 * c) / (-b - disc.sqrt());
    if !(-1e-9..=1.0 + 1e-9).contains(&theta) {
        return Err(TransformError::NoRoot { y });
    }
    Ok(kn.xs[k] + theta.clamp(0.0, 1.0) * w)
}

/// Tape node evaluating the spline row-wise: `x [M]`, `psi [M, 3K−1]` →
/// `[M, 2]` holding `(y, logdet)` per row.
pub fn spline_tape(tape: &mut Tape, x: Var, psi: Var, bins: usize, bound: f64) -> Result<Var, DiffError> {
    let (xv, pv) = (tape.value(x), tape.value(psi));
    let p = spline_psi_dim(bins);
    if pv.last_dim() != p || pv.numel() / p != xv.numel() {
        return Err(DiffError::Shape {
            op: "spline",
            left: xv.shape().to_vec(),
            right: pv.shape().to_vec(),
        });
    }
    let m = xv.numel();
    let mut out = Vec::with_capacity(2 * m);
    for (r, &xi) in xv.data().iter().enumerate() {
        let (y, ld) = eval(xi, &pv.data()[r * p..(r + 1) * p], bins, bound);
        out.push(y);
        out.push(ld);
    }
    let out = Tensor::new(&[m, 2], out)?;
    tape.custom(&[x, psi], out, Box::new(SplineOp { bins, bound }))
}

struct SplineOp {
    bins: usize,
    bound: f64,
}

impl CustomOp for SplineOp {
    fn name(&self) -> &'static str {
        "spline"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (xv, pv) = (inputs[0], inputs[1]);
        let p = spline_psi_dim(self.bins);
        let mut gx = vec![0.0; xv.numel()];
        let mut gp = vec![0.0; pv.numel()];
        let mut raw = vec![Dual::cst(0.0); p];
        for (r, &xi) in xv.data().iter().enumerate() {
            let (gy, gl) = (grad.data()[2 * r], grad.data()[2 * r + 1]);
            if xi.abs() >= self.bound {
                gx[r] = gy;
                continue;
            }
            let row = &pv.data()[r * p..(r + 1) * p];
            for (slot, &v) in raw.iter_mut().zip(row) {
                *slot = Dual::cst(v);
            }
            let (y, ld) = eval(Dual::new(xi, 1.0), &raw, self.bins, self.bound);
            gx[r] = gy * y.d + gl * ld.d;
            for j in 0..p {
                raw[j].d = 1.0;
                let (y, ld) = eval(Dual::cst(xi), &raw, self.bins, self.bound);
                gp[r * p + j] = gy * y.d + gl * ld.d;
                raw[j].d = 0.0;
            }
        }
        vec![
            Some(Tensor::new(xv.shape(), gx).expect("shape")),
            Some(Tensor::new(pv.shape(), gp).expect("shape")),
        ]
    }
}
