//! Probabilistic scores for ensemble (sample-based) forecasts.

use crate::error::{Error, Result};
use crate::numeric::norm_sf;
use std::f64::consts::SQRT_2;

/// Continuous ranked probability score of an ensemble forecast against a
/// scalar outcome, `∫ (F̂(z) − 1{y ≤ z})² dz`, evaluated exactly via the
/// identity `mean|x − y| − (1/n²) Σ_i (2i + 1 − n) x_(i)` over the sorted
/// ensemble. Lower is better; a point forecast `x ≡ c` scores `|c − y|`.
pub fn crps_sample(draws: &[f64], y: f64) -> Result<f64> {
    validate_ensemble(draws, y)?;
    let n = draws.len();
    let mut sorted = draws.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let mean_abs = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    let mut spread = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        spread += (2.0 * i as f64 + 1.0 - nf) * x;
    }
    Ok(mean_abs - spread / (nf * nf))
}

/// Threshold-weighted CRPS, `∫ w(z) (F̂(z) − 1{y ≤ z})² dz`, with a normal
/// distribution function weight `w(z) = Φ((z − weight_mean)/weight_sd)`
/// that emphasises the upper tail. `weight_sd = 0` denotes the limiting
/// step weight `1{z ≥ weight_mean}`; a step far below the ensemble makes
/// the weight identically 1 and recovers [`crps_sample`] exactly.
///
/// The integrand is piecewise constant between the sorted ensemble values
/// and the outcome, so the integral is computed exactly per interval from
/// the closed-form antiderivative of the weight.
pub fn twcrps_sample(draws: &[f64], y: f64, weight_mean: f64, weight_sd: f64) -> Result<f64> {
    validate_ensemble(draws, y)?;
    if !(weight_sd >= 0.0) || weight_mean.is_nan() || (weight_sd > 0.0 && !weight_mean.is_finite())
    {
        return Err(Error::config(format!(
            "weight must have a location and sd >= 0, got ({weight_mean}, {weight_sd})"
        )));
    }
    let mut points = draws.to_vec();
    points.push(y);
    points.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let nf = draws.len() as f64;
    let mut total = 0.0;
    let mut n_below = 0usize; // ensemble members <= left endpoint
    let mut y_passed = false;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        // Consume the left endpoint: it is one copy of either a draw or
        // the outcome. Ties are harmless because equal-endpoint intervals
        // have zero length and contribute nothing.
        if a == y && !y_passed {
            y_passed = true;
        } else {
            n_below += 1;
        }
        if b > a {
            let f = n_below as f64 / nf;
            let h = f64::from(y_passed);
            let c = (f - h) * (f - h);
            if c > 0.0 {
                total += c * weight_integral(a, b, weight_mean, weight_sd);
            }
        }
    }
    Ok(total)
}

/// `∫_a^b w(z) dz` for the normal-CDF weight, in a survival form that is
/// exact in the `w ≈ 1` region (no cancellation of large terms).
fn weight_integral(a: f64, b: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        // Step weight 1{z >= mean}.
        return (b - a.max(mean)).max(0.0);
    }
    // ∫ w = (b−a) − σ [ s·Φ̄(s) − φ(s) ]_{s_a}^{s_b}.
    let g = |z: f64| {
        let s = (z - mean) / sd;
        s * norm_sf(s) - norm_pdf(s)
    };
    ((b - a) - sd * (g(b) - g(a))).max(0.0)
}

fn norm_pdf(s: f64) -> f64 {
    (-0.5 * s * s).exp() / (SQRT_2 * std::f64::consts::PI.sqrt())
}

fn validate_ensemble(draws: &[f64], y: f64) -> Result<()> {
    if draws.len() < 2 {
        return Err(Error::data(format!(
            "scoring needs an ensemble of at least 2 draws, got {}",
            draws.len()
        )));
    }
    if draws.iter().any(|x| !x.is_finite()) || !y.is_finite() {
        return Err(Error::data("draws and outcome must be finite".to_string()));
    }
    Ok(())
}

/// Point-forecast reduction of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointPredictor {
    Mean,
    Median,
}

impl PointPredictor {
    fn apply(self, draws: &[f64]) -> f64 {
        match self {
            Self::Mean => draws.iter().sum::<f64>() / draws.len() as f64,
            Self::Median => crate::numeric::quantile_unsorted(draws, 0.5),
        }
    }
}

/// Mean squared prediction error of point predictions:
/// `mean((pred − truth)²)`, non-negative, 0 for a perfect match.
pub fn mpe(points: &[f64], truth: &[f64]) -> Result<f64> {
    if points.is_empty() || points.len() != truth.len() {
        return Err(Error::dimension(format!(
            "need matching non-empty prediction/outcome vectors, got {} and {}",
            points.len(),
            truth.len()
        )));
    }
    let mut s = 0.0;
    for (p, t) in points.iter().zip(truth) {
        if !t.is_finite() || !p.is_finite() {
            return Err(Error::data(format!(
                "prediction error undefined for outcome {t} / prediction {p}"
            )));
        }
        s += (p - t) * (p - t);
    }
    Ok(s / points.len() as f64)
}

/// [`mpe`] applied to per-cell ensembles collapsed by `predictor`
/// (the ensemble mean by default in callers).
pub fn mpe_from_draws(cells: &[Vec<f64>], truth: &[f64], predictor: PointPredictor) -> Result<f64> {
    if cells.iter().any(|c| c.is_empty()) {
        return Err(Error::data("every cell needs at least one draw".to_string()));
    }
    let points: Vec<f64> = cells.iter().map(|c| predictor.apply(c)).collect();
    mpe(&points, truth)
}
