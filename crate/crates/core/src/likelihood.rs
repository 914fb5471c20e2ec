//! Censored, latent-variable log-likelihood and log-posterior.
//!
//! Each time point contributes, given the latent factors `x2_t` and `x3_t·`:
//! a density term `(1/(α_j x2 x3_j)) f1(y_tj/(α_j x2 x3_j))` for every
//! exceedance cell, a distribution-function term `F1(u_tj/(α_j x2 x3_j))`
//! for every censored cell with a finite threshold, the time-factor density
//! `f2(x2_t)`, and the joint spatial-factor density (copula times
//! inverse-gamma margins). Missing cells (`u = +∞`) contribute exactly
//! nothing. The posterior works on transformed hyperparameters and
//! log-scale latents, so it adds the corresponding change-of-variables
//! terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::copula::{
    build_correlation, gaussian_copula_logdensity_scores, score_of_x3, t_copula_logdensity_scores,
    CorrelationModel,
};
use crate::error::{Error, Result};
use crate::model::{
    scale_vector, CopulaFamily, ExceedanceDataset, HyperParams, InvGammaFactor, StationSet,
    WeibullFactor,
};
use crate::numeric::LN_2PI;
use crate::transform::{log_jacobian, untransform, Bounds, TransformedHyperParams};

/// Latent multiplicative factors on the log scale: one `log x2` per time
/// point and an `n × d` matrix of `log x3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub log_x2: Vec<f64>,
    pub log_x3: DMatrix<f64>,
}

impl LatentState {
    /// All factors initialized to 1 (zero on the log scale).
    #[must_use]
    pub fn ones(n_times: usize, n_sites: usize) -> Self {
        Self { log_x2: vec![0.0; n_times], log_x3: DMatrix::zeros(n_times, n_sites) }
    }

    pub fn check_dims(&self, data: &ExceedanceDataset) -> Result<()> {
        if self.log_x2.len() != data.n_times()
            || self.log_x3.nrows() != data.n_times()
            || self.log_x3.ncols() != data.n_sites()
        {
            return Err(Error::dimension(format!(
                "latent state ({} times, {}×{} field) does not match data ({} times, {} sites)",
                self.log_x2.len(),
                self.log_x3.nrows(),
                self.log_x3.ncols(),
                data.n_times(),
                data.n_sites()
            )));
        }
        Ok(())
    }
}

/// Prior specification: `γ_l ~ N(0, gamma_var)` independently,
/// `β1 ~ U(0, δ1]`, `β2 ~ U(0, δ2]`, `β3 ~ Gamma(beta3_shape, beta3_rate)`,
/// `ρ ~ U(0, 2δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub gamma_var: f64,
    pub beta3_shape: f64,
    pub beta3_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { gamma_var: 100.0, beta3_shape: 1.0 / 3.0, beta3_rate: 0.01 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_var", self.gamma_var),
            ("beta3_shape", self.beta3_shape),
            ("beta3_rate", self.beta3_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Log prior density at natural-scale parameters; `−∞` outside the
    /// support.
    #[must_use]
    pub fn log_prior(&self, theta: &HyperParams, bounds: &Bounds) -> f64 {
        if theta.beta1 <= 0.0
            || theta.beta1 > bounds.delta1
            || theta.beta2 <= 0.0
            || theta.beta2 > bounds.delta2
            || theta.rho <= 0.0
            || theta.rho > 2.0 * bounds.delta
            || theta.beta3 <= 0.0
        {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for &g in &theta.gamma {
            lp += -0.5 * g * g / self.gamma_var - 0.5 * (LN_2PI + self.gamma_var.ln());
        }
        lp -= bounds.delta1.ln();
        lp -= bounds.delta2.ln();
        lp -= (2.0 * bounds.delta).ln();
        let (k, r) = (self.beta3_shape, self.beta3_rate);
        lp += k * r.ln() - ln_gamma(k) + (k - 1.0) * theta.beta3.ln() - r * theta.beta3;
        lp
    }
}

/// Precomputed per-evaluation quantities shared by the likelihood and its
/// gradients.
pub(crate) struct LikContext<'a> {
    pub log_alpha: Vec<f64>,
    pub w1: WeibullFactor,
    pub w2: WeibullFactor,
    pub ig: InvGammaFactor,
    pub family: CopulaFamily,
    pub data: &'a ExceedanceDataset,
}

impl<'a> LikContext<'a> {
    pub fn new(
        theta: &HyperParams,
        stations: &StationSet,
        data: &'a ExceedanceDataset,
    ) -> Result<Self> {
        if data.n_sites() != stations.n_sites() {
            return Err(Error::dimension(format!(
                "data has {} sites but the station set has {}",
                data.n_sites(),
                stations.n_sites()
            )));
        }
        let alpha = scale_vector(theta, stations)?;
        let log_alpha = alpha.iter().map(|a| a.ln()).collect();
        Ok(Self {
            log_alpha,
            w1: WeibullFactor::new(theta.beta1)?,
            w2: WeibullFactor::new(theta.beta2)?,
            ig: InvGammaFactor::new(theta.beta3)?,
            family: theta.copula,
            data,
        })
    }

    /// Observation terms (exceedance densities and censored distribution
    /// functions) of one time point, excluding the latent-factor densities.
    pub fn obs_terms(&self, t: usize, log_x2t: f64, log_x3_row: &[f64]) -> f64 {
        let mut ll = 0.0;
        for j in 0..self.data.n_sites() {
            if self.data.is_missing(t, j) {
                continue;
            }
            let log_m = self.log_alpha[j] + log_x2t + log_x3_row[j];
            let m = log_m.exp();
            if self.data.is_exceedance(t, j) {
                let w = self.data.y()[(t, j)] / m;
                ll += -log_m + self.w1.ln_pdf(w);
            } else {
                ll += self.w1.ln_cdf(self.data.u()[(t, j)] / m);
            }
        }
        ll
    }

    /// Joint log-density of one time point's spatial factor vector.
    pub fn x3_terms(&self, corr: &CorrelationModel, log_x3_row: &[f64]) -> f64 {
        let d = log_x3_row.len();
        let mut z = DVector::zeros(d);
        let mut marg = 0.0;
        for j in 0..d {
            let x = log_x3_row[j].exp();
            if !(x > 0.0 && x.is_finite()) {
                return f64::NEG_INFINITY;
            }
            z[j] = score_of_x3(&self.ig, x, self.family);
            marg += self.ig.ln_pdf(x);
        }
        let logc = match self.family {
            CopulaFamily::Gaussian => gaussian_copula_logdensity_scores(&z, corr),
            CopulaFamily::StudentT { nu } => t_copula_logdensity_scores(&z, corr, nu),
        };
        logc + marg
    }

    /// Full likelihood contribution of time `t` (observation terms plus both
    /// latent-factor densities).
    pub fn time_term(
        &self,
        corr: &CorrelationModel,
        t: usize,
        log_x2t: f64,
        log_x3_row: &[f64],
    ) -> f64 {
        let x2 = log_x2t.exp();
        if !(x2 > 0.0 && x2.is_finite()) {
            return f64::NEG_INFINITY;
        }
        self.obs_terms(t, log_x2t, log_x3_row) + self.w2.ln_pdf(x2) + self.x3_terms(corr, log_x3_row)
    }
}

pub(crate) fn latent_row(latent: &LatentState, t: usize) -> Vec<f64> {
    (0..latent.log_x3.ncols()).map(|j| latent.log_x3[(t, j)]).collect()
}

/// Censored log-likelihood of a single time point given its latent factors.
pub fn loglik_time(
    theta: &HyperParams,
    stations: &StationSet,
    data: &ExceedanceDataset,
    t: usize,
    latent: &LatentState,
    corr: &CorrelationModel,
) -> Result<f64> {
    latent.check_dims(data)?;
    if t >= data.n_times() {
        return Err(Error::dimension(format!(
            "time index {t} out of range for {} time points",
            data.n_times()
        )));
    }
    let ctx = LikContext::new(theta, stations, data)?;
    Ok(ctx.time_term(corr, t, latent.log_x2[t], &latent_row(latent, t)))
}

/// Censored log-likelihood summed over all time points; 0 for an empty
/// dataset.
pub fn loglik_total(
    theta: &HyperParams,
    stations: &StationSet,
    data: &ExceedanceDataset,
    latent: &LatentState,
    corr: &CorrelationModel,
) -> Result<f64> {
    latent.check_dims(data)?;
    let ctx = LikContext::new(theta, stations, data)?;
    let mut ll = 0.0;
    for t in 0..data.n_times() {
        ll += ctx.time_term(corr, t, latent.log_x2[t], &latent_row(latent, t));
    }
    Ok(ll)
}

/// Log-posterior value, or a rejection sentinel for proposals that land
/// outside the numerically representable support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogPost {
    Finite(f64),
    Reject,
}

impl LogPost {
    /// The finite value, or `None` for a rejected state.
    #[must_use]
    pub fn value(self) -> Option<f64> {
        match self {
            LogPost::Finite(v) => Some(v),
            LogPost::Reject => None,
        }
    }
}

/// Log-posterior on the sampling scale: likelihood at the back-transformed
/// parameters, plus log prior, plus the hyperparameter transform Jacobian,
/// plus the log-scale latent Jacobians `Σ log x2 + ΣΣ log x3`.
pub fn log_posterior(
    tilde: &TransformedHyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    bounds: &Bounds,
) -> Result<LogPost> {
    let theta = untransform(tilde, bounds);
    let corr = build_correlation(stations, theta.rho)?;
    log_posterior_with(tilde, &theta, latent, data, stations, priors, bounds, &corr)
}

/// As [`log_posterior`] with the correlation model supplied by the caller
/// (the sampler caches factorizations per `rho`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn log_posterior_with(
    tilde: &TransformedHyperParams,
    theta: &HyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    bounds: &Bounds,
    corr: &CorrelationModel,
) -> Result<LogPost> {
    priors.validate()?;
    latent.check_dims(data)?;
    let base = priors.log_prior(theta, bounds) + log_jacobian(tilde, bounds);
    if !base.is_finite() {
        return Ok(LogPost::Reject);
    }
    // Dimension mismatches are caller bugs; any other construction failure
    // (overflowed scales, degenerate shapes) marks the point inadmissible.
    let ctx = match LikContext::new(theta, stations, data) {
        Ok(c) => c,
        Err(e @ Error::Dimension(_)) => return Err(e),
        Err(_) => return Ok(LogPost::Reject),
    };
    let mut lp = base;
    lp += latent.log_x2.iter().sum::<f64>();
    lp += latent.log_x3.iter().sum::<f64>();
    for t in 0..data.n_times() {
        lp += ctx.time_term(corr, t, latent.log_x2[t], &latent_row(latent, t));
        if !lp.is_finite() {
            return Ok(LogPost::Reject);
        }
    }
    if lp.is_finite() {
        Ok(LogPost::Finite(lp))
    } else {
        Ok(LogPost::Reject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CopulaFamily;

    fn toy() -> (HyperParams, StationSet, ExceedanceDataset) {
        let stations = StationSet::from_coords(vec![[0.0, 0.0], [0.3, 0.4]]).unwrap();
        let theta = HyperParams {
            gamma: vec![0.2],
            beta1: 0.8,
            beta2: 0.7,
            beta3: 5.0,
            rho: 0.5,
            copula: CopulaFamily::Gaussian,
        };
        let y = DMatrix::from_row_slice(3, 2, &[1.2, 0.4, 2.5, 0.9, 0.7, 3.1]);
        let u = DMatrix::from_element(3, 2, 0.8);
        let data = ExceedanceDataset::new(y, u).unwrap();
        (theta, stations, data)
    }

    #[test]
    fn total_is_sum_of_time_terms() {
        let (theta, stations, data) = toy();
        let corr = build_correlation(&stations, theta.rho).unwrap();
        let latent = LatentState::ones(3, 2);
        let total = loglik_total(&theta, &stations, &data, &latent, &corr).unwrap();
        let sum: f64 = (0..3)
            .map(|t| loglik_time(&theta, &stations, &data, t, &latent, &corr).unwrap())
            .sum();
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn fully_missing_time_point_contributes_only_latent_densities() {
        let (theta, stations, _) = toy();
        let corr = build_correlation(&stations, theta.rho).unwrap();
        let y = DMatrix::from_element(1, 2, f64::NAN);
        let u = DMatrix::from_element(1, 2, f64::INFINITY);
        let data = ExceedanceDataset::new(y, u).unwrap();
        let latent = LatentState::ones(1, 2);
        let ll = loglik_time(&theta, &stations, &data, 0, &latent, &corr).unwrap();

        let ctx = LikContext::new(&theta, &stations, &data).unwrap();
        let expected = ctx.w2.ln_pdf(1.0) + ctx.x3_terms(&corr, &[0.0, 0.0]);
        assert!((ll - expected).abs() < 1e-12, "observation terms must vanish");
    }

    #[test]
    fn censoring_switch_changes_only_the_flipped_cell() {
        // Raising one threshold across its observation swaps a density term
        // for a distribution-function term and touches nothing else.
        let (theta, stations, data) = toy();
        let corr = build_correlation(&stations, theta.rho).unwrap();
        let latent = LatentState::ones(3, 2);
        let ll_before = loglik_time(&theta, &stations, &data, 0, &latent, &corr).unwrap();

        let mut u2 = data.u().clone();
        u2[(0, 0)] = 1.5; // above y(0,0) = 1.2: cell becomes censored
        let data2 = ExceedanceDataset::new(data.y().clone(), u2).unwrap();
        let ll_after = loglik_time(&theta, &stations, &data2, 0, &latent, &corr).unwrap();

        let ctx = LikContext::new(&theta, &stations, &data).unwrap();
        let m = ctx.log_alpha[0].exp(); // latents are 1
        let dens = -m.ln() + ctx.w1.ln_pdf(1.2 / m);
        let cens = ctx.w1.ln_cdf(1.5 / m);
        assert!(((ll_after - ll_before) - (cens - dens)).abs() < 1e-12);
    }

    #[test]
    fn censored_term_is_continuous_at_the_switch_point() {
        let (theta, stations, data) = toy();
        let corr = build_correlation(&stations, theta.rho).unwrap();
        let latent = LatentState::ones(3, 2);
        let y00 = data.y()[(0, 0)];

        let eval_at = |u00: f64| {
            let mut u = data.u().clone();
            u[(0, 0)] = u00;
            let d = ExceedanceDataset::new(data.y().clone(), u).unwrap();
            loglik_time(&theta, &stations, &d, 0, &latent, &corr).unwrap()
        };
        // Just below y the cell is an exceedance of a threshold ~y; at y it
        // is censored. The censored branch itself must be continuous in u.
        let at_switch = eval_at(y00);
        let below = eval_at(y00 * (1.0 - 1e-12));
        let ctx = LikContext::new(&theta, &stations, &data).unwrap();
        let m = ctx.log_alpha[0].exp();
        let jump = ctx.w1.ln_cdf(y00 / m) - (-m.ln() + ctx.w1.ln_pdf(y00 / m));
        assert!(((at_switch - below) - jump).abs() < 1e-8);
    }

    #[test]
    fn exceedance_density_matches_distribution_function_by_quadrature() {
        // One-site check that the (1/m) f1(y/m) observation density is the
        // derivative of F1(y/m): its integral over [y_lo, y_hi] must equal
        // the CDF difference to high accuracy.
        let stations = StationSet::from_coords(vec![[0.0, 0.0]]).unwrap();
        let theta = HyperParams {
            gamma: vec![0.3],
            beta1: 0.6,
            beta2: 0.7,
            beta3: 5.0,
            rho: 0.5,
            copula: CopulaFamily::Gaussian,
        };
        let corr = build_correlation(&stations, theta.rho).unwrap();
        let latent = LatentState {
            log_x2: vec![0.2],
            log_x3: DMatrix::from_element(1, 1, -0.1),
        };
        let density = |y: f64| {
            let data = ExceedanceDataset::new(
                DMatrix::from_element(1, 1, y),
                DMatrix::from_element(1, 1, 0.1),
            )
            .unwrap();
            let full = loglik_time(&theta, &stations, &data, 0, &latent, &corr).unwrap();
            // Strip the latent densities to isolate the observation term.
            let ctx = LikContext::new(&theta, &stations, &data).unwrap();
            (full - ctx.w2.ln_pdf(latent.log_x2[0].exp())
                - ctx.x3_terms(&corr, &[latent.log_x3[(0, 0)]]))
            .exp()
        };
        let (y_lo, y_hi) = (0.5, 2.0);
        // Composite Simpson with many panels (the integrand is smooth).
        let n = 4000;
        let h = (y_hi - y_lo) / n as f64;
        let mut integral = density(y_lo) + density(y_hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * density(y_lo + i as f64 * h);
        }
        integral *= h / 3.0;

        let ctx_m = {
            let a = scale_vector(&theta, &stations).unwrap()[0];
            a * latent.log_x2[0].exp() * latent.log_x3[(0, 0)].exp()
        };
        let w1 = WeibullFactor::new(theta.beta1).unwrap();
        let expect = w1.cdf(y_hi / ctx_m) - w1.cdf(y_lo / ctx_m);
        assert!(
            (integral - expect).abs() / expect < 1e-6,
            "quadrature {integral} vs CDF difference {expect}"
        );
    }

    #[test]
    fn empty_dataset_posterior_is_prior_plus_jacobian() {
        let stations = StationSet::from_coords(vec![[0.0, 0.0], [0.3, 0.4]]).unwrap();
        let theta = HyperParams {
            gamma: vec![0.1],
            beta1: 0.4,
            beta2: 0.6,
            beta3: 4.0,
            rho: 0.3,
            copula: CopulaFamily::Gaussian,
        };
        let bounds = Bounds::new(1.0, 1.0, 0.5).unwrap();
        let priors = PriorSpec::default();
        let tilde = crate::transform::transform(&theta, &bounds).unwrap();
        let data = ExceedanceDataset::new(DMatrix::zeros(0, 2), DMatrix::zeros(0, 2)).unwrap();
        let latent = LatentState::ones(0, 2);
        let lp = log_posterior(&tilde, &latent, &data, &stations, &priors, &bounds)
            .unwrap()
            .value()
            .unwrap();
        let expect = priors.log_prior(&theta, &bounds) + log_jacobian(&tilde, &bounds);
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn runaway_latents_are_rejected_not_nan() {
        let (theta, stations, data) = toy();
        let bounds = Bounds::new(1.0, 1.0, 0.5).unwrap();
        let tilde = crate::transform::transform(&theta, &bounds).unwrap();
        let mut latent = LatentState::ones(3, 2);
        latent.log_x3[(1, 1)] = 800.0; // exp overflows
        let lp = log_posterior(&tilde, &latent, &data, &stations, &PriorSpec::default(), &bounds)
            .unwrap();
        assert_eq!(lp, LogPost::Reject);
    }

    #[test]
    fn prior_density_integrates_against_known_normalizers() {
        let priors = PriorSpec::default();
        let bounds = Bounds::new(1.0, 1.0, 0.5).unwrap();
        let theta = HyperParams {
            gamma: vec![0.0],
            beta1: 0.5,
            beta2: 0.5,
            beta3: 2.0,
            rho: 0.5,
            copula: CopulaFamily::Gaussian,
        };
        // Hand-computed: N(0;0,100) density, two unit uniforms, U(0,1) for
        // rho, Gamma(1/3, rate 0.01) at 2.
        let lp = priors.log_prior(&theta, &bounds);
        let normal = -0.5 * (LN_2PI + 100.0_f64.ln());
        let gamma_term = (1.0 / 3.0) * 0.01_f64.ln() - ln_gamma(1.0 / 3.0)
            + (1.0 / 3.0 - 1.0) * 2.0_f64.ln()
            - 0.02;
        assert!((lp - (normal + gamma_term)).abs() < 1e-12);

        let mut outside = theta;
        outside.rho = 1.5; // > 2δ = 1
        assert_eq!(priors.log_prior(&outside, &bounds), f64::NEG_INFINITY);
    }
}
