//! Analytic gradients of the log-posterior for gradient-based proposals.
//!
//! Latent gradients are taken with respect to the log-scale factors and
//! include the change-of-variables terms, so they match finite differences
//! of [`crate::likelihood::log_posterior`] exactly. Hyperparameter
//! gradients are taken on the transformed (unconstrained) scale, with the
//! data part evaluated on a mini-batch of time points and rescaled by
//! `n / b`; priors and transform Jacobian enter once, unscaled.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::digamma;

use crate::copula::{score_of_x3, CorrelationModel};
use crate::error::{Error, Result};
use crate::likelihood::{latent_row, LatentState, LikContext, PriorSpec};
use crate::model::{CopulaFamily, ExceedanceDataset, HyperParams, StationSet, WeibullFactor};
use crate::numeric::{norm_logpdf, t_logpdf};
use crate::transform::{d_logit_jac, untransform, Bounds, TransformedHyperParams};

/// Hyperparameter blocks updated jointly by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperBlock {
    /// Regression coefficients of the site scale.
    Gamma,
    /// Tail-decay parameter of the observation factor.
    Beta1,
    /// Tail-decay parameter of the shared time factor.
    Beta2,
    /// Spatial-factor shape and correlation range, updated by a random walk
    /// (no gradient is defined for this block).
    Beta3Rho,
}

/// `g / (e^g − 1)`, continuous through `g → 0`.
fn expm1_ratio(g: f64) -> f64 {
    if g < 1e-10 {
        1.0 - 0.5 * g
    } else {
        g / g.exp_m1()
    }
}

/// Derivative of an exceedance cell's log-density term with respect to
/// `log m`.
fn d_lnm_exceed(w1: &WeibullFactor, g: f64) -> f64 {
    w1.shape() * (g - 1.0)
}

/// Derivative of a censored cell's log-distribution-function term with
/// respect to `log m`.
fn d_lnm_censored(w1: &WeibullFactor, g: f64) -> f64 {
    -w1.shape() * expm1_ratio(g)
}

/// Derivative of an exceedance cell's log-density with respect to the
/// natural shape parameter `beta`, where `ln_cw = ln(c·w)` and
/// `g = (c·w)^(1/beta)`.
fn d_beta_exceed(beta: f64, psi: f64, ln_cw: f64, g: f64) -> f64 {
    -1.0 / beta + ln_cw / (beta * beta) * (g - 1.0) + psi / beta * (1.0 - g)
}

/// Censored counterpart of [`d_beta_exceed`].
fn d_beta_censored(beta: f64, psi: f64, ln_cw: f64, g: f64) -> f64 {
    expm1_ratio(g) * (-ln_cw / (beta * beta) + psi / beta)
}

/// Observation terms of time `t`: returns their log-likelihood value and
/// fills `d_lnm[j]` with each cell's derivative with respect to `log m_tj`
/// (zero for missing cells).
fn obs_value_and_dlnm(
    ctx: &LikContext,
    t: usize,
    log_x2t: f64,
    log_x3_row: &[f64],
    d_lnm: &mut [f64],
) -> f64 {
    let mut val = 0.0;
    for j in 0..ctx.data.n_sites() {
        d_lnm[j] = 0.0;
        if ctx.data.is_missing(t, j) {
            continue;
        }
        let log_m = ctx.log_alpha[j] + log_x2t + log_x3_row[j];
        if ctx.data.is_exceedance(t, j) {
            let w = ctx.data.y()[(t, j)] / log_m.exp();
            let g = ctx.w1.exponent(w);
            val += -log_m + ctx.w1.ln_pdf(w);
            d_lnm[j] = d_lnm_exceed(&ctx.w1, g);
        } else {
            let w = ctx.data.u()[(t, j)] / log_m.exp();
            let g = ctx.w1.exponent(w);
            val += ctx.w1.ln_cdf(w);
            d_lnm[j] = d_lnm_censored(&ctx.w1, g);
        }
    }
    val
}

/// Batch target value and gradient for the time-factor coordinates
/// `log x2[t]`, `t ∈ batch`: observation terms, `f2` density, and the
/// log-scale Jacobian. Terms constant in `x2` are omitted.
pub(crate) fn x2_value_grad(
    ctx: &LikContext,
    latent: &LatentState,
    batch: &[usize],
) -> (f64, Vec<f64>) {
    let d = ctx.data.n_sites();
    let mut d_lnm = vec![0.0; d];
    let mut val = 0.0;
    let mut grad = vec![0.0; batch.len()];
    for (i, &t) in batch.iter().enumerate() {
        let row = latent_row(latent, t);
        let lx2 = latent.log_x2[t];
        let x2 = lx2.exp();
        if !(x2 > 0.0 && x2.is_finite()) {
            return (f64::NEG_INFINITY, grad);
        }
        val += obs_value_and_dlnm(ctx, t, lx2, &row, &mut d_lnm);
        val += ctx.w2.ln_pdf(x2) + lx2;
        let g2 = ctx.w2.exponent(x2);
        grad[i] = d_lnm.iter().sum::<f64>() + ctx.w2.shape() * (1.0 - g2);
    }
    if !val.is_finite() {
        val = f64::NEG_INFINITY;
    }
    (val, grad)
}

/// Batch target value and gradient for the spatial-factor coordinates
/// `log x3[t, ·]`, `t ∈ batch`: observation terms, copula and margins, and
/// the log-scale Jacobian. Terms constant in `x3` are omitted.
pub(crate) fn x3_value_grad(
    ctx: &LikContext,
    corr: &CorrelationModel,
    latent: &LatentState,
    batch: &[usize],
) -> (f64, DMatrix<f64>) {
    let d = ctx.data.n_sites();
    let mut d_lnm = vec![0.0; d];
    let mut val = 0.0;
    let mut grad = DMatrix::zeros(batch.len(), d);
    let a = ctx.ig.shape();
    let b = ctx.ig.scale();
    for (i, &t) in batch.iter().enumerate() {
        let row = latent_row(latent, t);
        val += obs_value_and_dlnm(ctx, t, latent.log_x2[t], &row, &mut d_lnm);

        let mut z = DVector::zeros(d);
        let mut dz_dlx = vec![0.0; d]; // dz_j / d log x3_j
        let mut ok = true;
        for j in 0..d {
            let x = row[j].exp();
            if !(x > 0.0 && x.is_finite()) {
                ok = false;
                break;
            }
            z[j] = score_of_x3(&ctx.ig, x, ctx.family);
            let ln_marg = match ctx.family {
                CopulaFamily::Gaussian => norm_logpdf(z[j]),
                CopulaFamily::StudentT { nu } => t_logpdf(z[j], nu),
            };
            dz_dlx[j] = (ctx.ig.ln_pdf(x) + row[j] - ln_marg).exp();
            val += ctx.ig.ln_pdf(x) + row[j];
        }
        if !ok || !val.is_finite() {
            return (f64::NEG_INFINITY, grad);
        }
        let w = corr.solve(&z);
        let quad = z.dot(&w);
        match ctx.family {
            CopulaFamily::Gaussian => {
                val += -0.5 * corr.logdet() - 0.5 * (quad - z.norm_squared());
                for j in 0..d {
                    grad[(i, j)] =
                        d_lnm[j] + (-a + b / row[j].exp()) + (z[j] - w[j]) * dz_dlx[j];
                }
            }
            CopulaFamily::StudentT { nu } => {
                let dd = d as f64;
                val += crate::copula::t_copula_logdensity_scores(&z, corr, nu);
                for j in 0..d {
                    let copula_dz = -(nu + dd) * w[j] / (nu + quad)
                        + (nu + 1.0) * z[j] / (nu + z[j] * z[j]);
                    grad[(i, j)] = d_lnm[j] + (-a + b / row[j].exp()) + copula_dz * dz_dlx[j];
                }
            }
        }
        if !val.is_finite() {
            return (f64::NEG_INFINITY, grad);
        }
    }
    (val, grad)
}

fn check_batch(batch: &[usize], n_times: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::dimension("mini-batch must be non-empty".to_string()));
    }
    let mut seen = vec![false; n_times];
    for &t in batch {
        if t >= n_times {
            return Err(Error::dimension(format!(
                "batch index {t} out of range for {n_times} time points"
            )));
        }
        if seen[t] {
            return Err(Error::data(format!("batch repeats time point {t}")));
        }
        seen[t] = true;
    }
    Ok(())
}

/// Gradient of the log-posterior with respect to the log-scale latent
/// coordinates of the given time points. Returns the `log x2` gradient (one
/// entry per batch element) and the `log x3` gradient (`batch × d`).
pub fn grad_latent(
    theta: &HyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    batch: &[usize],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    latent.check_dims(data)?;
    check_batch(batch, data.n_times())?;
    let ctx = LikContext::new(theta, stations, data)?;
    let corr = crate::copula::build_correlation(stations, theta.rho)?;
    let (_, gx2) = x2_value_grad(&ctx, latent, batch);
    let (_, gx3) = x3_value_grad(&ctx, &corr, latent, batch);
    Ok((gx2, gx3))
}

/// Mini-batch data-term gradient on the transformed scale, without the
/// `n / b` rescaling and without prior or Jacobian terms. Summing the
/// results over a partition of the time points gives the full-data term.
pub fn grad_hyper_data(
    tilde: &TransformedHyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    bounds: &Bounds,
    block: HyperBlock,
    batch: &[usize],
) -> Result<Vec<f64>> {
    latent.check_dims(data)?;
    check_batch(batch, data.n_times())?;
    let theta = untransform(tilde, bounds);
    let ctx = LikContext::new(&theta, stations, data)?;
    data_grad(&ctx, &theta, latent, stations, bounds, block, batch)
}

/// Stochastic-gradient estimate of the transformed-scale log-posterior
/// gradient for one hyperparameter block: `(n / b) ×` batch data terms plus
/// prior and transform-Jacobian derivatives.
#[allow(clippy::too_many_arguments)]
pub fn grad_hyper(
    tilde: &TransformedHyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    bounds: &Bounds,
    block: HyperBlock,
    batch: &[usize],
) -> Result<Vec<f64>> {
    latent.check_dims(data)?;
    check_batch(batch, data.n_times())?;
    priors.validate()?;
    let theta = untransform(tilde, bounds);
    let ctx = LikContext::new(&theta, stations, data)?;
    grad_hyper_with(tilde, &theta, &ctx, latent, stations, priors, bounds, block, batch)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grad_hyper_with(
    tilde: &TransformedHyperParams,
    theta: &HyperParams,
    ctx: &LikContext,
    latent: &LatentState,
    stations: &StationSet,
    priors: &PriorSpec,
    bounds: &Bounds,
    block: HyperBlock,
    batch: &[usize],
) -> Result<Vec<f64>> {
    let scale = ctx.data.n_times() as f64 / batch.len() as f64;
    let mut grad = data_grad(ctx, theta, latent, stations, bounds, block, batch)?;
    for g in &mut grad {
        *g *= scale;
    }
    match block {
        HyperBlock::Gamma => {
            for (l, g) in grad.iter_mut().enumerate() {
                *g += -theta.gamma[l] / priors.gamma_var;
            }
        }
        HyperBlock::Beta1 => grad[0] += d_logit_jac(tilde.beta1_t),
        HyperBlock::Beta2 => grad[0] += d_logit_jac(tilde.beta2_t),
        HyperBlock::Beta3Rho => unreachable!("rejected by data_grad"),
    }
    Ok(grad)
}

/// Batch data-term gradient on the transformed scale (shared core).
fn data_grad(
    ctx: &LikContext,
    theta: &HyperParams,
    latent: &LatentState,
    stations: &StationSet,
    bounds: &Bounds,
    block: HyperBlock,
    batch: &[usize],
) -> Result<Vec<f64>> {
    let d = ctx.data.n_sites();
    match block {
        HyperBlock::Gamma => {
            let p1 = theta.gamma.len();
            let mut grad = vec![0.0; p1];
            let mut d_lnm = vec![0.0; d];
            for &t in batch {
                let row = latent_row(latent, t);
                obs_value_and_dlnm(ctx, t, latent.log_x2[t], &row, &mut d_lnm);
                for j in 0..d {
                    if d_lnm[j] == 0.0 {
                        continue;
                    }
                    grad[0] += d_lnm[j];
                    for l in 1..p1 {
                        grad[l] += d_lnm[j] * stations.covariates()[(j, l - 1)];
                    }
                }
            }
            Ok(grad)
        }
        HyperBlock::Beta1 => {
            let beta = theta.beta1;
            let psi = digamma(1.0 + beta);
            let mut acc = 0.0;
            for &t in batch {
                let lx2 = latent.log_x2[t];
                for j in 0..d {
                    if ctx.data.is_missing(t, j) {
                        continue;
                    }
                    let log_m = ctx.log_alpha[j] + lx2 + latent.log_x3[(t, j)];
                    if ctx.data.is_exceedance(t, j) {
                        let ln_w = ctx.data.y()[(t, j)].ln() - log_m;
                        let ln_cw = ctx.w1.ln_c() + ln_w;
                        let g = (ln_cw / beta).exp();
                        acc += d_beta_exceed(beta, psi, ln_cw, g);
                    } else {
                        let ln_w = ctx.data.u()[(t, j)].ln() - log_m;
                        let ln_cw = ctx.w1.ln_c() + ln_w;
                        let g = (ln_cw / beta).exp();
                        acc += d_beta_censored(beta, psi, ln_cw, g);
                    }
                }
            }
            // Chain rule to the logit-transformed coordinate.
            Ok(vec![acc * beta * (1.0 - beta / bounds.delta1)])
        }
        HyperBlock::Beta2 => {
            let beta = theta.beta2;
            let psi = digamma(1.0 + beta);
            let mut acc = 0.0;
            for &t in batch {
                let ln_cw = ctx.w2.ln_c() + latent.log_x2[t];
                let g = (ln_cw / beta).exp();
                acc += d_beta_exceed(beta, psi, ln_cw, g);
            }
            Ok(vec![acc * beta * (1.0 - beta / bounds.delta2)])
        }
        HyperBlock::Beta3Rho => Err(Error::unsupported_block(
            "the (beta3, rho) block is updated by a random walk; no gradient is defined",
        )),
    }
}
