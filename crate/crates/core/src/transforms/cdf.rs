//! Monotone one-hidden-layer CDF networks mapping the real line into (0, 1).
//!
//! `y = sigmoid(tanh(exp(w1)·x + b1)ᵀ exp(w2) + b2)`. The log-derivative is
//! assembled in log space:
//!
//! ```text
//! log y' = log sigmoid'(u) + logsumexp_k[w2_k + w1_k + log(1 − tanh²(a_k))]
//! ```
//!
//! with `log(1 − tanh²(a)) = 2(log 2 − a − softplus(−2a))`.

use std::f64::consts::LN_2;

use super::TransformError;
use crate::diffcore::{logsumexp, sigmoid, softplus};

/// Pseudo-parameters of a per-dimension CDF network. Raw values; the
/// effective weights are `exp(w1)` and `exp(w2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfPsi {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Width of the pseudo-parameter vector for a hidden layer of `hidden` units.
pub fn cdf_psi_dim(hidden: usize) -> usize {
    3 * hidden + 1
}

impl CdfPsi {
    /// Split a `3H + 1` slice laid out as `w1, b1, w2, b2`.
    pub fn from_slice(psi: &[f64]) -> Self {
        assert!(psi.len() >= 4 && (psi.len() - 1).is_multiple_of(3), "cdf psi length");
        let h = (psi.len() - 1) / 3;
        Self {
            w1: psi[..h].to_vec(),
            b1: psi[h..2 * h].to_vec(),
            w2: psi[2 * h..3 * h].to_vec(),
            b2: psi[3 * h],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }
}

/// Globally shared weights of the conditional CDF network.
///
/// `w1_hat` is stored `E×H` row-major and applied as `h·w1_hat`; `w2_hat`
/// has length `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCdfPhi {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub w1_hat: Vec<f64>,
    pub w2_hat: Vec<f64>,
}

impl SharedCdfPhi {
    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn embed(&self) -> usize {
        self.w2_hat.len()
    }

    /// Fold the conditioning embedding into effective biases.
    pub fn conditioned(&self, h: &[f64]) -> CdfPsi {
        let hidden = self.hidden();
        assert_eq!(h.len(), self.embed(), "embedding length");
        let mut b1 = self.b1.clone();
        for (e, &he) in h.iter().enumerate() {
            let row = &self.w1_hat[e * hidden..(e + 1) * hidden];
            for (b, &w) in b1.iter_mut().zip(row) {
                *b += he * w;
            }
        }
        let b2 = self.b2 + h.iter().zip(&self.w2_hat).map(|(a, b)| a * b).sum::<f64>();
        CdfPsi {
            w1: self.w1.clone(),
            b1,
            w2: self.w2.clone(),
            b2,
        }
    }
}

/// `log(1 − tanh²(a))` without cancellation.
pub fn log_sech2(a: f64) -> f64 {
    2.0 * (LN_2 - a - softplus(-2.0 * a))
}

/// `log sigmoid'(u) = log σ(u) + log σ(−u)`.
pub fn log_sigmoid_prime(u: f64) -> f64 {
    -softplus(-u) - softplus(u)
}

fn preactivation(x: f64, psi: &CdfPsi) -> f64 {
    psi.w1
        .iter()
        .zip(&psi.b1)
        .zip(&psi.w2)
        .map(|((&w1, &b1), &w2)| (w1.exp() * x + b1).tanh() * w2.exp())
        .sum::<f64>()
        + psi.b2
}

/// Forward value in (0, 1) only.
pub fn cdf_value(x: f64, psi: &CdfPsi) -> f64 {
    sigmoid(preactivation(x, psi))
}

pub fn cdf_fwd(x: f64, psi: &CdfPsi) -> (f64, f64) {
    let u = preactivation(x, psi);
    let terms: Vec<f64> = psi
        .w1
        .iter()
        .zip(&psi.b1)
        .zip(&psi.w2)
        .map(|((&w1, &b1), &w2)| w2 + w1 + log_sech2(w1.exp() * x + b1))
        .collect();
    (sigmoid(u), log_sigmoid_prime(u) + logsumexp(&terms))
}

pub fn shared_cdf_fwd(x: f64, h: &[f64], phi: &SharedCdfPhi) -> (f64, f64) {
    cdf_fwd(x, &phi.conditioned(h))
}

/// Outward doublings allowed when searching for a bracket.
pub const MAX_DOUBLINGS: usize = 64;

/// Invert a strictly increasing map into (0, 1) by bisection.
///
/// The bracket starts at `[-1, 1]` and each end doubles outward until it
/// straddles `y`; bisection then runs until the bracket is narrower than `tol`.
pub fn bisect_increasing(f: impl Fn(f64) -> f64, y: f64, tol: f64) -> Result<f64, TransformError> {
    if !(y > 0.0 && y < 1.0) {
        return Err(TransformError::Domain(format!("target {y} outside (0, 1)")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(TransformError::Domain(format!("tolerance {tol} must be positive")));
    }
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut n = 0;
    while f(lo) > y {
        n += 1;
        if n > MAX_DOUBLINGS {
            return Err(TransformError::BracketNotFound { y });
        }
        hi = hi.min(lo);
        lo *= 2.0;
    }
    n = 0;
    while f(hi) < y {
        n += 1;
        if n > MAX_DOUBLINGS {
            return Err(TransformError::BracketNotFound { y });
        }
        lo = lo.max(hi);
        hi *= 2.0;
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn cdf_inv(y: f64, psi: &CdfPsi, tol: f64) -> Result<f64, TransformError> {
    bisect_increasing(|x| cdf_value(x, psi), y, tol)
}

pub fn shared_cdf_inv(y: f64, h: &[f64], phi: &SharedCdfPhi, tol: f64) -> Result<f64, TransformError> {
    cdf_inv(y, &phi.conditioned(h), tol)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_psi(rng: &mut ChaCha8Rng, h: usize) -> CdfPsi {
        let raw: Vec<f64> = (0..cdf_psi_dim(h)).map(|_| rng.random_range(-1.5..1.5)).collect();
        CdfPsi::from_slice(&raw)
    }

    fn random_phi(rng: &mut ChaCha8Rng, h: usize, e: usize) -> SharedCdfPhi {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        SharedCdfPhi {
            w1: v(h),
            b1: v(h),
            w2: v(h),
            b2: v(1)[0],
            w1_hat: v(h * e),
            w2_hat: v(e),
        }
    }

    /// Richardson-extrapolated central difference.
    fn slope(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
        (4.0 * d(h / 2.0) - d(h)) / 3.0
    }

    fn degenerate() -> CdfPsi {
        CdfPsi {
            w1: vec![0.0],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: 0.0,
        }
    }

    #[test]
    fn degenerate_network_at_zero() {
        let (y, ld) = cdf_fwd(0.0, &degenerate());
        assert_eq!(y, 0.5);
        assert!((ld - 0.25f64.ln()).abs() < 1e-12);
        assert!(cdf_inv(0.5, &degenerate(), 1e-10).unwrap().abs() < 1e-10);
    }

    #[test]
    fn strictly_increasing_and_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..cdf_psi_dim(8)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let psi = CdfPsi::from_slice(&raw);
            let mut prev = f64::NEG_INFINITY;
            for i in 0..120 {
                let x = -3.0 + 0.05 * i as f64;
                let (y, _) = cdf_fwd(x, &psi);
                assert!(y > prev && y > 0.0 && y < 1.0);
                prev = y;
            }
        }
    }

    #[test]
    fn logdet_matches_central_difference_slope() {
        // Differences of y lose all precision once y is within ~1e-6 of 0 or
        // 1, so saturated draws are skipped rather than counted.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-3;
        let mut checked = 0;
        while checked < 100 {
            let psi = random_psi(&mut rng, 8);
            let x = rng.random_range(-3.0..3.0);
            let (y, ld) = cdf_fwd(x, &psi);
            if !(1e-4..=1.0 - 1e-4).contains(&y) {
                continue;
            }
            checked += 1;
            let slope = slope(|x| cdf_value(x, &psi), x, h);
            let rel = (ld.exp() - slope).abs() / slope;
            assert!(rel < 1e-6, "rel {rel:e} at x={x}");
        }
    }

    #[test]
    fn log_sech2_is_stable() {
        for a in [-800.0, -20.0, -1.0, 0.0, 0.5, 30.0, 800.0] {
            let v = log_sech2(a);
            assert!(v.is_finite());
            if f64::abs(a) < 20.0 {
                assert!((v - (1.0 - f64::tanh(a).powi(2)).ln()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn inversion_recovers_forward_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = random_psi(&mut rng, 8);
        let (y, _) = cdf_fwd(1.0, &psi);
        assert!((cdf_inv(y, &psi, 1e-6).unwrap() - 1.0).abs() < 1e-6);
        let (y1, y2) = (0.2, 0.7);
        assert!(cdf_inv(y1, &psi, 1e-8).unwrap() < cdf_inv(y2, &psi, 1e-8).unwrap());
    }

    #[test]
    fn inversion_errors() {
        let psi = degenerate();
        assert!(matches!(cdf_inv(0.0, &psi, 1e-6), Err(TransformError::Domain(_))));
        assert!(matches!(cdf_inv(1.5, &psi, 1e-6), Err(TransformError::Domain(_))));
        // Bounded range: sigmoid(±1) cannot reach 0.9.
        assert!(matches!(
            cdf_inv(0.9, &psi, 1e-6),
            Err(TransformError::BracketNotFound { .. })
        ));
    }

    #[test]
    fn shared_cdf_with_zero_embedding_reduces_to_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = random_phi(&mut rng, 6, 4);
        let plain = CdfPsi {
            w1: phi.w1.clone(),
            b1: phi.b1.clone(),
            w2: phi.w2.clone(),
            b2: phi.b2,
        };
        for x in [-2.0, 0.0, 0.3, 4.0] {
            assert_eq!(shared_cdf_fwd(x, &[0.0; 4], &phi), cdf_fwd(x, &plain));
        }
    }

    #[test]
    fn shared_cdf_monotone_with_exact_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let step = 1e-3;
        for _ in 0..100 {
            let phi = random_phi(&mut rng, 8, 5);
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = rng.random_range(-3.0..3.0);
            let (y, ld) = shared_cdf_fwd(x, &h, &phi);
            let (yp, _) = shared_cdf_fwd(x + step, &h, &phi);
            let (ym, _) = shared_cdf_fwd(x - step, &h, &phi);
            assert!(ym < y && y < yp);
            let slope = slope(|x| shared_cdf_fwd(x, &h, &phi).0, x, step);
            assert!((ld.exp() - slope).abs() / slope < 1e-6);
            let back = shared_cdf_inv(y, &h, &phi, 1e-9).unwrap();
            assert!((back - x).abs() < 1e-8);
        }
    }
}
