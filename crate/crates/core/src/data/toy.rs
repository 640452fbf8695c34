//! Two-dimensional synthetic densities.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetMatrix};
use crate::diffcore::logsumexp;

const MIXTURE_RADIUS: f64 = 4.0;
const MIXTURE_STD: f64 = 0.3;
const MIXTURE_COMPONENTS: usize = 8;
const NOISE_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy {
    /// Eight equal-weight isotropic Gaussians (std 0.3) on a circle of radius 4.
    #[serde(rename = "gauss_mixture_8")]
    GaussMixture8,
    /// Two interleaved half circles with Gaussian noise (std 0.1).
    TwoMoons,
    /// Unit circle with Gaussian noise (std 0.1).
    Ring,
}

impl Toy {
    pub fn name(self) -> &'static str {
        match self {
            Toy::GaussMixture8 => "gauss_mixture_8",
            Toy::TwoMoons => "two_moons",
            Toy::Ring => "ring",
        }
    }
}

impl FromStr for Toy {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        [Toy::GaussMixture8, Toy::TwoMoons, Toy::Ring]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| DataError::UnknownToy(s.to_string()))
    }
}

fn mixture_mean(k: usize) -> (f64, f64) {
    let a = TAU * k as f64 / MIXTURE_COMPONENTS as f64;
    (MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin())
}

pub fn toy_generate(toy: Toy, n: usize, seed: u64) -> Result<DatasetMatrix, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y, noise) = match toy {
            Toy::GaussMixture8 => {
                let (x, y) = mixture_mean(rng.random_range(0..MIXTURE_COMPONENTS));
                (x, y, MIXTURE_STD)
            }
            Toy::TwoMoons => {
                let t = rng.random_range(0.0..PI);
                if rng.random_bool(0.5) {
                    (t.cos(), t.sin(), NOISE_STD)
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin(), NOISE_STD)
                }
            }
            Toy::Ring => {
                let t = rng.random_range(0.0..TAU);
                (t.cos(), t.sin(), NOISE_STD)
            }
        };
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        data.push(x + noise * ex);
        data.push(y + noise * ey);
    }
    DatasetMatrix::new(n, 2, data)?.with_names(vec!["x".into(), "y".into()])
}

/// Exact log-density of the eight-component mixture.
pub fn gauss_mixture_8_log_density(x: f64, y: f64) -> f64 {
    let var = MIXTURE_STD * MIXTURE_STD;
    let norm = -(MIXTURE_COMPONENTS as f64).ln() - (TAU * var).ln();
    let terms: Vec<f64> = (0..MIXTURE_COMPONENTS)
        .map(|k| {
            let (mx, my) = mixture_mean(k);
            norm - ((x - mx).powi(2) + (y - my).powi(2)) / (2.0 * var)
        })
        .collect();
    logsumexp(&terms)
}

/// Monte-Carlo estimate of the mixture's own NLL (its differential
/// entropy): mean and standard error over `n` seeded draws.
pub fn gauss_mixture_8_oracle_nll(n: usize, seed: u64) -> Result<(f64, f64), DataError> {
    let m = toy_generate(Toy::GaussMixture8, n, seed)?;
    let nll: Vec<f64> = (0..n).map(|r| -gauss_mixture_8_log_density(m.row(r)[0], m.row(r)[1])).collect();
    let mean = nll.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok((mean, 0.0));
    }
    let var = nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_is_reproducible() {
        for toy in [Toy::GaussMixture8, Toy::TwoMoons, Toy::Ring] {
            let a = toy_generate(toy, 5, 42).unwrap();
            let b = toy_generate(toy, 5, 42).unwrap();
            assert_eq!(a.row(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.row(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_ne!(a, toy_generate(toy, 5, 43).unwrap());
        }
    }

    #[test]
    fn mixture_sample_mean_is_centered() {
        let n = 100_000;
        let m = toy_generate(Toy::GaussMixture8, n, 1).unwrap();
        // Per-coordinate population std: √(R²/2 + σ²).
        let sigma = (MIXTURE_RADIUS * MIXTURE_RADIUS / 2.0 + MIXTURE_STD * MIXTURE_STD).sqrt();
        for c in 0..2 {
            let mean = (0..n).map(|r| m.row(r)[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "column {c}: {mean}");
        }
    }

    #[test]
    fn shapes_of_other_toys() {
        let moons = toy_generate(Toy::TwoMoons, 2000, 0).unwrap();
        let ring = toy_generate(Toy::Ring, 2000, 0).unwrap();
        for r in 0..2000 {
            let p = ring.row(r);
            let radius = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((radius - 1.0).abs() < 0.7);
            assert!(moons.row(r)[0] > -1.6 && moons.row(r)[0] < 2.6);
        }
        assert!(matches!("spiral".parse::<Toy>(), Err(DataError::UnknownToy(_))));
        assert!(matches!(toy_generate(Toy::Ring, 0, 0), Err(DataError::Empty)));
    }

    /// Entropy by midpoint quadrature on a fine grid; independent of sampling.
    fn quadrature_entropy(step: f64) -> f64 {
        let half = 7.0;
        let cells = (2.0 * half / step).round() as usize;
        let mut total = 0.0;
        for i in 0..cells {
            let x = -half + (i as f64 + 0.5) * step;
            for j in 0..cells {
                let y = -half + (j as f64 + 0.5) * step;
                let lp = gauss_mixture_8_log_density(x, y);
                total -= lp.exp() * lp;
            }
        }
        total * step * step
    }

    #[test]
    fn oracle_nll_matches_quadrature_and_closed_form() {
        let (mc, se) = gauss_mixture_8_oracle_nll(1_000_000, 2024).unwrap();
        let quad = quadrature_entropy(0.01);
        // Components barely overlap: entropy ≈ ln 8 + ln(2πeσ²).
        let separated = (8.0f64).ln() + (TAU * std::f64::consts::E * MIXTURE_STD * MIXTURE_STD).ln();
        assert!((quad - separated).abs() < 1e-3, "{quad} vs {separated}");
        assert!((mc - quad).abs() < 3.0 * se + 1e-4, "{mc} ± {se} vs {quad}");
        assert!((mc - 2.509).abs() < 0.01);
    }

    #[test]
    fn log_density_integrates_to_one() {
        let step = 0.02;
        let mut mass = 0.0;
        let mut x = -7.0 + step / 2.0;
        while x < 7.0 {
            let mut y = -7.0 + step / 2.0;
            while y < 7.0 {
                mass += gauss_mixture_8_log_density(x, y).exp();
                y += step;
            }
            x += step;
        }
        assert!((mass * step * step - 1.0).abs() < 1e-6);
    }

    #[test]
    fn serde_names_match_cli_names() {
        for toy in [Toy::GaussMixture8, Toy::TwoMoons, Toy::Ring] {
            let json = serde_json::to_string(&toy).unwrap();
            assert_eq!(json, format!("\"{}\"", toy.name()));
            assert_eq!(serde_json::from_str::<Toy>(&json).unwrap(), toy);
            assert_eq!(toy.name().parse::<Toy>().unwrap(), toy);
        }
    }
}
