//! Exponential-correlation Gaussian and Student-t copulas for the spatial
//! factor: cached Cholesky factorizations, log-densities on the uniform
//! scale, the joint density of the inverse-gamma field, and copula sampling.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{CopulaFamily, InvGammaFactor, StationSet};
use crate::numeric::{norm_cdf, norm_quantile, t_cdf, t_logpdf, t_quantile};

/// Largest uniform value we hand back from [`copula_sample`]; keeps entries
/// strictly inside (0, 1) even when a score lands beyond the resolution of
/// the distribution function.
const UNIFORM_MAX: f64 = 1.0 - 1e-16;
const UNIFORM_MIN: f64 = 1e-300;

/// Exponential correlation matrix `Σ_ij = exp(−dist_ij/ρ)` with a cached
/// Cholesky factorization.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    rho: f64,
    sigma: DMatrix<f64>,
    l: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    jitter: f64,
}

/// Builds the correlation model for the stations at range `rho`,
/// factorizing once. Near-singular matrices get an escalating diagonal
/// jitter (1e-8, ×10 per retry, three retries) before failing.
pub fn build_correlation(stations: &StationSet, rho: f64) -> Result<CorrelationModel> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::domain(format!("correlation range must be positive, got {rho}")));
    }
    let d = stations.n_sites();
    let mut sigma = DMatrix::identity(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let c = (-stations.distance(i, j) / rho).exp();
            sigma[(i, j)] = c;
            sigma[(j, i)] = c;
        }
    }

    let mut jitter = 0.0;
    for attempt in 0..4 {
        let mut m = sigma.clone();
        if jitter > 0.0 {
            for i in 0..d {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            let l = chol.l();
            let logdet = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
            return Ok(CorrelationModel { rho, sigma, l, chol, logdet, jitter });
        }
        jitter = if attempt == 0 { 1e-8 } else { jitter * 10.0 };
    }

    // Name the closest pair: that is almost always what broke positivity.
    let (mut bi, mut bj, mut bd) = (0, 0, f64::INFINITY);
    for i in 0..d {
        for j in (i + 1)..d {
            let dist = stations.distance(i, j);
            if dist < bd {
                (bi, bj, bd) = (i, j, dist);
            }
        }
    }
    Err(Error::numerical(format!(
        "correlation matrix not positive definite at rho={rho} even with jitter 1e-6; \
         closest station pair is ({bi}, {bj}) at distance {bd:.3e}"
    )))
}

impl CorrelationModel {
    #[must_use]
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    #[must_use]
    pub fn rho(&self) -> f64 {
        self.rho
    }

    #[must_use]
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Diagonal jitter that was needed to factorize (0 in the usual case).
    #[must_use]
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[must_use]
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `Σ⁻¹ z` through the cached factorization.
    #[must_use]
    pub fn solve(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(z)
    }

    /// Quadratic form `zᵀ Σ⁻¹ z`.
    #[must_use]
    pub fn quad_form(&self, z: &DVector<f64>) -> f64 {
        z.dot(&self.solve(z))
    }

    /// Draws one correlated standard-normal score vector.
    pub fn sample_scores<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_scores_into(rng, &mut out);
        out
    }

    /// As [`Self::sample_scores`] without allocating.
    pub fn sample_scores_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<f64>) {
        let d = self.dim();
        debug_assert_eq!(out.len(), d);
        // out = L ξ with iid standard normal ξ, accumulated column-wise.
        out.fill(0.0);
        for j in 0..d {
            let xi: f64 = StandardNormal.sample(rng);
            for i in j..d {
                out[i] += self.l[(i, j)] * xi;
            }
        }
    }
}

/// Validates copula arguments shared by the density functions.
fn check_uniforms(v: &[f64], corr: &CorrelationModel) -> Result<()> {
    if v.len() != corr.dim() {
        return Err(Error::dimension(format!(
            "uniform vector has length {} but the correlation model is {}-dimensional",
            v.len(),
            corr.dim()
        )));
    }
    if v.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::domain("copula arguments must lie strictly inside (0, 1)"));
    }
    Ok(())
}

/// Gaussian copula log-density at uniforms `v`:
/// `−½ log|Σ| − ½ zᵀ(Σ⁻¹ − I)z` with `z_j = Φ⁻¹(v_j)`.
pub fn gaussian_copula_logdensity(v: &[f64], corr: &CorrelationModel) -> Result<f64> {
    check_uniforms(v, corr)?;
    let z = DVector::from_iterator(v.len(), v.iter().map(|&vi| norm_quantile(vi)));
    Ok(gaussian_copula_logdensity_scores(&z, corr))
}

/// Gaussian copula log-density with normal scores supplied directly (used
/// internally so far-tail scores keep full precision).
#[must_use]
pub(crate) fn gaussian_copula_logdensity_scores(z: &DVector<f64>, corr: &CorrelationModel) -> f64 {
    let quad = corr.quad_form(z);
    let sum_sq = z.dot(z);
    -0.5 * corr.logdet() - 0.5 * (quad - sum_sq)
}

/// Student-t copula log-density at uniforms `v` for `nu > 0` degrees of
/// freedom: multivariate-t log-density of the t-scores minus the sum of
/// univariate t log-densities.
pub fn t_copula_logdensity(v: &[f64], corr: &CorrelationModel, nu: f64) -> Result<f64> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("degrees of freedom must be positive, got {nu}")));
    }
    check_uniforms(v, corr)?;
    let z = DVector::from_iterator(v.len(), v.iter().map(|&vi| t_quantile(vi, nu)));
    Ok(t_copula_logdensity_scores(&z, corr, nu))
}

#[must_use]
pub(crate) fn t_copula_logdensity_scores(
    z: &DVector<f64>,
    corr: &CorrelationModel,
    nu: f64,
) -> f64 {
    let d = z.len() as f64;
    let quad = corr.quad_form(z);
    let joint = ln_gamma((nu + d) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * d * (nu * std::f64::consts::PI).ln()
        - 0.5 * corr.logdet()
        - 0.5 * (nu + d) * (quad / nu).ln_1p();
    let margins: f64 = z.iter().map(|&zi| t_logpdf(zi, nu)).sum();
    joint - margins
}

/// Copula log-density under either family.
pub fn copula_logdensity(v: &[f64], corr: &CorrelationModel, family: CopulaFamily) -> Result<f64> {
    match family {
        CopulaFamily::Gaussian => gaussian_copula_logdensity(v, corr),
        CopulaFamily::StudentT { nu } => t_copula_logdensity(v, corr, nu),
    }
}

/// Copula score of an inverse-gamma value: the copula-scale quantile of
/// `F3(x)`, evaluated through whichever tail of the distribution function
/// is smaller so that extreme latents keep full precision.
#[inline]
#[must_use]
pub(crate) fn score_of_x3(ig: &InvGammaFactor, x: f64, family: CopulaFamily) -> f64 {
    let cdf = ig.cdf(x);
    let (tail, negate) = if cdf <= 0.5 { (cdf, true) } else { (ig.sf(x), false) };
    let tail = tail.max(UNIFORM_MIN);
    let score = match family {
        CopulaFamily::Gaussian => -norm_quantile(tail),
        CopulaFamily::StudentT { nu } => -t_quantile(tail, nu),
    };
    if negate {
        -score
    } else {
        score
    }
}

/// Joint log-density of the spatial factor vector `x3` (inverse-gamma
/// margins tied by the copula): copula log-density at `F3(x3)` plus the
/// sum of marginal log-densities.
pub fn x3_joint_logdensity(
    x3: &[f64],
    beta3: f64,
    corr: &CorrelationModel,
    family: CopulaFamily,
) -> Result<f64> {
    if x3.len() != corr.dim() {
        return Err(Error::dimension(format!(
            "x3 has length {} but the correlation model is {}-dimensional",
            x3.len(),
            corr.dim()
        )));
    }
    if x3.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::domain("spatial factor values must be positive and finite"));
    }
    family.validate()?;
    let ig = InvGammaFactor::new(beta3)?;
    let z = DVector::from_iterator(x3.len(), x3.iter().map(|&x| score_of_x3(&ig, x, family)));
    let logc = match family {
        CopulaFamily::Gaussian => gaussian_copula_logdensity_scores(&z, corr),
        CopulaFamily::StudentT { nu } => t_copula_logdensity_scores(&z, corr, nu),
    };
    Ok(logc + x3.iter().map(|&x| ig.ln_pdf(x)).sum::<f64>())
}

/// Draws `n` vectors of dependent uniforms from the copula; rows are
/// replicates. Entries are clamped to the largest representable values
/// strictly inside (0, 1).
pub fn copula_sample(
    corr: &CorrelationModel,
    family: CopulaFamily,
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    family.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = corr.dim();
    let chi2 = match family {
        CopulaFamily::StudentT { nu } => {
            Some(GammaDist::new(nu / 2.0, 2.0 / nu).expect("valid dof"))
        }
        CopulaFamily::Gaussian => None,
    };
    let mut out = DMatrix::zeros(n, d);
    let mut scores = DVector::zeros(d);
    for t in 0..n {
        corr.sample_scores_into(&mut rng, &mut scores);
        let mix = chi2.as_ref().map(|c| c.sample(&mut rng).sqrt());
        for j in 0..d {
            let v = match (family, mix) {
                (CopulaFamily::Gaussian, _) => norm_cdf(scores[j]),
                (CopulaFamily::StudentT { nu }, Some(m)) => t_cdf(scores[j] / m, nu),
                _ => unreachable!(),
            };
            out[(t, j)] = v.clamp(UNIFORM_MIN, UNIFORM_MAX);
        }
    }
    Ok(out)
}
