//! Regular link functions mapping the linear parameter space onto
//! coefficients bounded below by `f_min`.
//!
//! The concrete map is a rescaled softplus,
//!
//! ```text
//! Ψ(x) = f_min + (1 − f_min) · softplus(x + b) / softplus(b)
//! ```
//!
//! evaluated as `1 + (1 − f_min)(softplus(x+b)/softplus(b) − 1)` so that
//! `Ψ(0) = 1` holds exactly in floating point. Every derivative of softplus is
//! bounded, `Ψ' = (1 − f_min) σ(x + b) / softplus(b)`, and the inverse is
//! closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnspace::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFunction {
    f_min: f64,
    #[serde(default = "default_shift")]
    b: f64,
}

fn default_shift() -> f64 {
    1.0
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Inverse of softplus on `(0, ∞)`.
#[inline]
fn softplus_inv(s: f64) -> f64 {
    // log(e^s − 1) = s + log(1 − e^{−s})
    s + (-(-s).exp_m1()).ln()
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LinkFunction {
    pub fn new(f_min: f64, b: f64) -> Result<Self> {
        if !(f_min > 0.0 && f_min < 1.0) {
            return Err(Error::InvalidArgument(format!("f_min must lie in (0, 1), got {f_min}")));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("link shift b must be positive, got {b}")));
        }
        Ok(Self { f_min, b })
    }

    pub fn with_floor(f_min: f64) -> Result<Self> {
        Self::new(f_min, default_shift())
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn shift(&self) -> f64 {
        self.b
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let ratio = softplus(x + self.b) / softplus(self.b);
        1.0 + (1.0 - self.f_min) * (ratio - 1.0)
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        (1.0 - self.f_min) * sigmoid(x + self.b) / softplus(self.b)
    }

    /// `sup_x Ψ'(x)`, attained as `x → ∞`.
    pub fn deriv_bound(&self) -> f64 {
        (1.0 - self.f_min) / softplus(self.b)
    }

    pub fn inverse(&self, f: f64) -> Option<f64> {
        if !(f > self.f_min) || !f.is_finite() {
            return None;
        }
        let ratio = 1.0 + (f - 1.0) / (1.0 - self.f_min);
        let s = ratio * softplus(self.b);
        (s > 0.0).then(|| softplus_inv(s) - self.b)
    }

    pub fn apply_field(&self, theta: &GridFunction) -> GridFunction {
        theta.map(|x| self.apply(x))
    }

    pub fn deriv_field(&self, theta: &GridFunction) -> GridFunction {
        theta.map(|x| self.deriv(x))
    }

    pub fn inverse_field(&self, f: &GridFunction) -> Result<GridFunction> {
        let mut out = f.clone();
        for (node, v) in out.values_mut().iter_mut().enumerate() {
            *v = self.inverse(*v).ok_or(Error::BelowFloor {
                node,
                value: *v,
                floor: self.f_min,
            })?;
        }
        Ok(out)
    }
}

pub fn link_apply(link: &LinkFunction, theta: &GridFunction) -> GridFunction {
    link.apply_field(theta)
}

pub fn link_inverse(link: &LinkFunction, f: &GridFunction) -> Result<GridFunction> {
    link.inverse_field(f)
}

pub fn link_deriv(link: &LinkFunction, theta: &GridFunction) -> GridFunction {
    link.deriv_field(theta)
}
