//! Scalar abstraction so the spline can be evaluated on plain floats and on
//! forward-mode dual numbers (used for its tape gradient).

use std::ops::{Add, Div, Mul, Neg, Sub};

pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn softplus(self) -> Self {
        if self.re() > 0.0 {
            self + (Self::cst(1.0) + (-self).exp()).ln()
        } else {
            (Self::cst(1.0) + self.exp()).ln()
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn softplus(self) -> Self {
        crate::diffcore::softplus(self)
    }
}

/// Value plus one tangent direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self::new(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Self::new(v, 0.0)
    }
    fn re(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Self::new(self.v.ln(), self.d / self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_matches_analytic_derivatives() {
        let x = Dual::new(0.7, 1.0);
        let f = (x * x).exp() / (Dual::cst(1.0) + x).ln();
        let v: f64 = 0.7;
        let expected = (2.0 * v * (v * v).exp() * (1.0 + v).ln() - (v * v).exp() / (1.0 + v))
            / (1.0 + v).ln().powi(2);
        assert!((f.d - expected).abs() < 1e-12);
        let s = Dual::new(-1.2, 1.0).softplus();
        assert!((s.d - crate::diffcore::sigmoid(-1.2)).abs() < 1e-12);
    }
}
