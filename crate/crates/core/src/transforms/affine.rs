/// Location and log-scale of an affine transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePsi {
    pub mu: f64,
    pub log_sigma: f64,
}

impl AffinePsi {
    pub const IDENTITY: Self = Self {
        mu: 0.0,
        log_sigma: 0.0,
    };

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

/// `y = μ + σx`, `log dy/dx = log σ`.
pub fn affine_fwd(x: f64, psi: &AffinePsi) -> (f64, f64) {
    (psi.mu + psi.sigma() * x, psi.log_sigma)
}

pub fn affine_inv(y: f64, psi: &AffinePsi) -> f64 {
    (y - psi.mu) / psi.sigma()
}
