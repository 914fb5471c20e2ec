//! Bijections between natural-scale hyperparameters and the unconstrained
//! sampling scale, with the log-Jacobian of the inverse map.
//!
//! The sampler works on `θ̃ = (γ, logit(β1/δ1), logit(β2/δ2), −log(β3−1),
//! logit(ρ/2δ))`, so every proposal maps back to a valid parameter and the
//! posterior picks up the change-of-variables term below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CopulaFamily, HyperParams};

/// Support bounds of the uniform priors: `β1 ∈ (0, δ1)`, `β2 ∈ (0, δ2)`,
/// `ρ ∈ (0, 2δ)` with `δ` the maximum pairwise station distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub delta1: f64,
    pub delta2: f64,
    pub delta: f64,
}

impl Bounds {
    pub fn new(delta1: f64, delta2: f64, delta: f64) -> Result<Self> {
        for (name, v) in [("delta1", delta1), ("delta2", delta2), ("delta", delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { delta1, delta2, delta })
    }
}

/// Hyperparameters on the unconstrained sampling scale. Fields with a `_t`
/// suffix are transformed coordinates; `gamma` is untouched by the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedHyperParams {
    pub gamma: Vec<f64>,
    pub beta1_t: f64,
    pub beta2_t: f64,
    pub beta3_t: f64,
    pub rho_t: f64,
    pub copula: CopulaFamily,
}

/// Stable logistic function.
#[inline]
#[must_use]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit_scaled(value: f64, bound: f64, name: &str) -> Result<f64> {
    if !(value > 0.0 && value < bound) {
        return Err(Error::domain(format!(
            "{name} = {value} must lie strictly inside (0, {bound}) to be transformed"
        )));
    }
    Ok(value.ln() - (bound - value).ln())
}

/// Maps natural parameters to the sampling scale. Values on or outside the
/// open support are rejected.
pub fn transform(theta: &HyperParams, bounds: &Bounds) -> Result<TransformedHyperParams> {
    theta.validate()?;
    Ok(TransformedHyperParams {
        gamma: theta.gamma.clone(),
        beta1_t: logit_scaled(theta.beta1, bounds.delta1, "beta1")?,
        beta2_t: logit_scaled(theta.beta2, bounds.delta2, "beta2")?,
        beta3_t: -(theta.beta3 - 1.0).ln(),
        rho_t: logit_scaled(theta.rho, 2.0 * bounds.delta, "rho")?,
        copula: theta.copula,
    })
}

/// Inverse map; every finite transformed point yields a valid interior
/// parameter vector.
#[must_use]
pub fn untransform(tilde: &TransformedHyperParams, bounds: &Bounds) -> HyperParams {
    HyperParams {
        gamma: tilde.gamma.clone(),
        beta1: bounds.delta1 * sigmoid(tilde.beta1_t),
        beta2: bounds.delta2 * sigmoid(tilde.beta2_t),
        beta3: 1.0 + (-tilde.beta3_t).exp(),
        rho: 2.0 * bounds.delta * sigmoid(tilde.rho_t),
        copula: tilde.copula,
    }
}

/// `log |det ∂θ/∂θ̃|` of the inverse map: the γ block is the identity; each
/// scaled-logit coordinate contributes `log δ + x − 2 log(1+e^x)` and the
/// `−log(β3−1)` coordinate contributes `−β̃3`.
#[must_use]
pub fn log_jacobian(tilde: &TransformedHyperParams, bounds: &Bounds) -> f64 {
    logit_jac(tilde.beta1_t, bounds.delta1)
        + logit_jac(tilde.beta2_t, bounds.delta2)
        - tilde.beta3_t
        + logit_jac(tilde.rho_t, 2.0 * bounds.delta)
}

#[inline]
fn logit_jac(x: f64, bound: f64) -> f64 {
    // log(bound) + x − 2 log(1 + e^x), evaluated stably on both sides.
    bound.ln() + x - 2.0 * softplus(x)
}

/// `log(1 + e^x)` without overflow.
#[inline]
#[must_use]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`log_jacobian`] with respect to one transformed
/// coordinate; used by the gradient of the log posterior.
#[inline]
#[must_use]
pub(crate) fn d_logit_jac(x: f64) -> f64 {
    1.0 - 2.0 * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> Bounds {
        Bounds::new(1.0, 1.0, 1.5).unwrap()
    }

    #[test]
    fn transform_known_value() {
        let theta = HyperParams {
            gamma: vec![0.3],
            beta1: 0.8,
            beta2: 0.5,
            beta3: 5.0,
            rho: 1.5,
            copula: CopulaFamily::Gaussian,
        };
        let t = transform(&theta, &bounds()).unwrap();
        assert!((t.beta1_t - 4.0_f64.ln()).abs() < 1e-12, "logit(0.8) should be log 4");
        assert!((t.beta2_t - 0.0).abs() < 1e-12);
        assert!((t.beta3_t + 4.0_f64.ln()).abs() < 1e-12);
        assert!((t.rho_t - 0.0).abs() < 1e-12, "rho at half the bound maps to 0");
    }

    #[test]
    fn boundary_values_are_rejected() {
        let mut theta = HyperParams {
            gamma: vec![0.0],
            beta1: 1.0, // on the bound delta1 = 1
            beta2: 0.5,
            beta3: 5.0,
            rho: 1.0,
            copula: CopulaFamily::Gaussian,
        };
        assert!(transform(&theta, &bounds()).is_err());
        theta.beta1 = 0.5;
        theta.rho = 3.0; // == 2δ
        assert!(transform(&theta, &bounds()).is_err());
    }

    #[test]
    fn round_trip_is_tight_over_random_draws() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let theta = HyperParams {
                gamma: vec![rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)],
                beta1: rng.gen_range(0.01..0.99),
                beta2: rng.gen_range(0.01..0.99),
                beta3: 1.0 + rng.gen_range(0.05..30.0),
                rho: rng.gen_range(0.01..2.9),
                copula: CopulaFamily::Gaussian,
            };
            let back = untransform(&transform(&theta, &b).unwrap(), &b);
            assert!((back.beta1 - theta.beta1).abs() / theta.beta1 < 1e-12);
            assert!((back.beta2 - theta.beta2).abs() / theta.beta2 < 1e-12);
            assert!((back.beta3 - theta.beta3).abs() / theta.beta3 < 1e-12);
            assert!((back.rho - theta.rho).abs() / theta.rho < 1e-12);
        }
    }

    #[test]
    fn log_jacobian_value_at_zero() {
        // Each scaled-logit coordinate at 0 contributes log(bound) − 2 log 2;
        // with δ1 = 1 that is exactly −2 log 2.
        let tilde = TransformedHyperParams {
            gamma: vec![0.0],
            beta1_t: 0.0,
            beta2_t: 0.0,
            beta3_t: 0.0,
            rho_t: 0.0,
            copula: CopulaFamily::Gaussian,
        };
        let b = bounds();
        let expect = -2.0 * 2.0_f64.ln() * 2.0 // beta1, beta2 with unit bounds
            + 0.0                               // beta3 term −β̃3
            + (3.0_f64).ln() - 2.0 * 2.0_f64.ln(); // rho with bound 2δ = 3
        assert!((log_jacobian(&tilde, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let tilde = TransformedHyperParams {
                gamma: vec![0.0],
                beta1_t: rng.gen_range(-4.0..4.0),
                beta2_t: rng.gen_range(-4.0..4.0),
                beta3_t: rng.gen_range(-3.0..3.0),
                rho_t: rng.gen_range(-4.0..4.0),
                copula: CopulaFamily::Gaussian,
            };
            // Jacobian determinant from numeric derivatives of the inverse map.
            let h = 1e-6;
            let fd = |f: &dyn Fn(&TransformedHyperParams) -> f64, coord: usize| {
                let mut hi = tilde.clone();
                let mut lo = tilde.clone();
                match coord {
                    0 => {
                        hi.beta1_t += h;
                        lo.beta1_t -= h;
                    }
                    1 => {
                        hi.beta2_t += h;
                        lo.beta2_t -= h;
                    }
                    2 => {
                        hi.beta3_t += h;
                        lo.beta3_t -= h;
                    }
                    _ => {
                        hi.rho_t += h;
                        lo.rho_t -= h;
                    }
                }
                (f(&hi) - f(&lo)) / (2.0 * h)
            };
            let num = fd(&|t| untransform(t, &b).beta1, 0).abs().ln()
                + fd(&|t| untransform(t, &b).beta2, 1).abs().ln()
                + fd(&|t| untransform(t, &b).beta3, 2).abs().ln()
                + fd(&|t| untransform(t, &b).rho, 3).abs().ln();
            let ana = log_jacobian(&tilde, &b);
            assert!((num - ana).abs() < 1e-6, "fd {num} vs analytic {ana}");
        }
    }
}
