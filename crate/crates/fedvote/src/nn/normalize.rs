//! Normalization functions mapping latent weights onto (-1, 1).
//!
//! A normalization function is a strictly increasing odd map from the real
//! line into the open unit interval. Clients train latent (unconstrained)
//! weights and push them through the map before quantization; the server
//! inverts the map when reconstructing latent weights from a soft vote.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_2_SQRT_PI;

/// Supported families. Both are parameterized by a slope factor `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationFamily {
    /// `x -> tanh(a * x)`
    Tanh,
    /// `x -> erf(a * x)`
    Erf,
}

/// A concrete normalization function: a family plus a slope factor `a > 0`.
///
/// Larger `a` pushes outputs toward the endpoints, which lowers stochastic
/// rounding noise but also flattens gradients far from zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationFn {
    family: NormalizationFamily,
    a: f64,
}

impl NormalizationFn {
    pub fn new(family: NormalizationFamily, a: f64) -> Result<Self> {
        if !a.is_finite() || a <= 0.0 {
            return Err(Error::invalid(format!(
                "normalization slope factor must be finite and positive, got {a}"
            )));
        }
        Ok(NormalizationFn { family, a })
    }

    /// The default map used throughout: `tanh(1.5 x)`.
    pub fn default_tanh() -> Self {
        NormalizationFn {
            family: NormalizationFamily::Tanh,
            a: 1.5,
        }
    }

    pub fn family(&self) -> NormalizationFamily {
        self.family
    }

    pub fn slope_factor(&self) -> f64 {
        self.a
    }

    /// Applies the map to one latent value.
    ///
    /// The result lies in [-1, 1]; it reaches the endpoints only when
    /// `a * x` is so large that the map saturates in double precision
    /// (|a x| over roughly 19 for tanh, 6 for erf). Latent weights
    /// reconstructed from a clipped soft vote never get near that region.
    pub fn apply(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::domain(format!(
                "normalization input must be finite, got {x}"
            )));
        }
        Ok(match self.family {
            NormalizationFamily::Tanh => (self.a * x).tanh(),
            NormalizationFamily::Erf => libm::erf(self.a * x),
        })
    }

    /// Inverts the map. Defined for |y| < 1 strictly.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !y.is_finite() || y.abs() >= 1.0 {
            return Err(Error::domain(format!(
                "normalization inverse is defined on (-1, 1), got {y}"
            )));
        }
        Ok(match self.family {
            NormalizationFamily::Tanh => y.atanh() / self.a,
            NormalizationFamily::Erf => erf_inv(y) / self.a,
        })
    }

    /// Derivative of the map at `x`. Strictly positive, maximal at zero.
    pub fn derivative(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::domain(format!(
                "normalization input must be finite, got {x}"
            )));
        }
        Ok(match self.family {
            NormalizationFamily::Tanh => {
                let t = (self.a * x).tanh();
                self.a * (1.0 - t * t)
            }
            NormalizationFamily::Erf => {
                let ax = self.a * x;
                self.a * FRAC_2_SQRT_PI * (-ax * ax).exp()
            }
        })
    }

    /// The maximum slope, attained at the origin.
    pub fn slope_at_zero(&self) -> f64 {
        match self.family {
            NormalizationFamily::Tanh => self.a,
            NormalizationFamily::Erf => self.a * FRAC_2_SQRT_PI,
        }
    }
}

/// Inverse error function via Newton iteration.
///
/// Starts from `y * sqrt(pi) / 2`, which never overshoots the root because
/// erf is concave on the positive half line with slope at most 2/sqrt(pi).
/// Newton steps from below then increase monotonically toward the root, so
/// the iteration is globally convergent; near the root it is quadratic.
fn erf_inv(y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let sign = y.signum();
    let t = y.abs();
    let mut h = t / FRAC_2_SQRT_PI;
    for _ in 0..200 {
        let residual = libm::erf(h) - t;
        let slope = FRAC_2_SQRT_PI * (-h * h).exp();
        let step = residual / slope;
        h -= step;
        if step.abs() <= 1e-15 * (1.0 + h.abs()) {
            break;
        }
    }
    sign * h
}
