//! Posterior prediction at held-out cells and tail-dependence summaries.
//!
//! Two prediction routes are provided. [`posterior_predict`] works for any
//! cell of the fitted grid — including fully masked sites, whose spatial
//! factors the chain samples from their copula conditional — by combining
//! stored latent snapshots with fresh draws of the independent
//! observation-level factor. [`predict_new_sites`] extends a fit to sites
//! that were never part of the model by conditioning the copula scores of
//! the new locations on the stored ones.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::copula::{build_correlation, score_of_x3};
use crate::error::{Error, Result};
use crate::model::{
    simulate_field_rng, CopulaFamily, HyperParams, InvGammaFactor, StationSet, WeibullFactor,
};
use crate::numeric::{norm_cdf, norm_sf, quantile_type7, t_cdf, t_sf};
use crate::sampler::{ChainTrace, LatentSnapshot};

/// Predictive ensembles for a list of `(time, site)` cells; one draw vector
/// per cell, all of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub cells: Vec<(usize, usize)>,
    pub draws: Vec<Vec<f64>>,
}

impl PredictiveDraws {
    #[must_use]
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    #[must_use]
    pub fn cell_draws(&self, cell: usize) -> &[f64] {
        &self.draws[cell]
    }

    /// Central predictive interval at the given coverage level (e.g. 0.9),
    /// from type-7 quantiles of the ensemble.
    #[must_use]
    pub fn interval(&self, cell: usize, level: f64) -> (f64, f64) {
        let a = 0.5 * (1.0 - level);
        let mut sorted = self.draws[cell].clone();
        sorted.sort_unstable_by(|x, y| x.partial_cmp(y).expect("draw contains NaN"));
        (quantile_type7(&sorted, a), quantile_type7(&sorted, 1.0 - a))
    }
}

/// Prediction settings: ensemble size per stored posterior draw and the
/// RNG seed for the fresh observation-level factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictConfig {
    pub replicates_per_draw: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { replicates_per_draw: 1, seed: 0 }
    }
}

/// Rebuilds natural-scale hyperparameters from a snapshot row (trace column
/// order: scale coefficients, the two Weibull weights, the inverse-gamma
/// shape, the range).
fn hyper_from_row(row: &[f64], n_covariates: usize, copula: CopulaFamily) -> Result<HyperParams> {
    if row.len() != n_covariates + 5 {
        return Err(Error::dimension(format!(
            "snapshot stores {} parameters but the stations imply {}",
            row.len(),
            n_covariates + 5
        )));
    }
    let p1 = n_covariates + 1;
    let theta = HyperParams {
        gamma: row[..p1].to_vec(),
        beta1: row[p1],
        beta2: row[p1 + 1],
        beta3: row[p1 + 2],
        rho: row[p1 + 3],
        copula,
    };
    theta.validate()?;
    Ok(theta)
}

fn kept_snapshots<'a>(traces: &'a [ChainTrace]) -> Vec<&'a LatentSnapshot> {
    traces
        .iter()
        .flat_map(|tr| tr.latents.iter().filter(|s| s.iteration > tr.burnin))
        .collect()
}

fn validate_cells(cells: &[(usize, usize)], n_times: usize, n_sites: usize) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::config("no cells requested".to_string()));
    }
    for &(t, j) in cells {
        if t >= n_times || j >= n_sites {
            return Err(Error::dimension(format!(
                "cell ({t}, {j}) outside the {n_times}×{n_sites} grid"
            )));
        }
    }
    Ok(())
}

/// Posterior predictive ensembles at cells of the fitted grid. For each
/// post-burn-in latent snapshot the deterministic scale `α_j x2_t x3_tj` is
/// reassembled and multiplied by `replicates_per_draw` fresh draws of the
/// independent Weibull factor.
pub fn posterior_predict(
    traces: &[ChainTrace],
    stations: &StationSet,
    copula: CopulaFamily,
    cells: &[(usize, usize)],
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    let snaps = kept_snapshots(traces);
    if snaps.is_empty() {
        return Err(Error::data("no post-burn-in latent snapshots available".to_string()));
    }
    if cfg.replicates_per_draw == 0 {
        return Err(Error::config("replicates_per_draw must be positive".to_string()));
    }
    let n_times = snaps[0].log_x3.nrows();
    validate_cells(cells, n_times, stations.n_sites())?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut draws = vec![Vec::with_capacity(snaps.len() * cfg.replicates_per_draw); cells.len()];
    for snap in &snaps {
        let theta = hyper_from_row(&snap.hyper, stations.n_covariates(), copula)?;
        let alpha = crate::model::scale_vector(&theta, stations)?;
        let w1 = WeibullFactor::new(theta.beta1)?;
        for _ in 0..cfg.replicates_per_draw {
            for (c, &(t, j)) in cells.iter().enumerate() {
                let m = alpha[j] * (snap.log_x2[t] + snap.log_x3[(t, j)]).exp();
                draws[c].push(m * w1.sample(&mut rng));
            }
        }
    }
    Ok(PredictiveDraws { cells: cells.to_vec(), draws })
}

/// Locations (and covariate rows, in the fitted standardized units) of
/// sites outside the fitted station set.
#[derive(Debug, Clone, PartialEq)]
pub struct NewSites {
    pub coords: Vec<[f64; 2]>,
    /// `n_new × n_covariates` matrix; zero columns when the model has none.
    pub covariates: DMatrix<f64>,
}

impl NewSites {
    fn validate(&self, n_covariates: usize) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::config("no new sites supplied".to_string()));
        }
        if self.covariates.nrows() != self.coords.len()
            || self.covariates.ncols() != n_covariates
        {
            return Err(Error::dimension(format!(
                "covariates are {}×{} but {} sites × {} covariates are required",
                self.covariates.nrows(),
                self.covariates.ncols(),
                self.coords.len(),
                n_covariates
            )));
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Inverse of the copula score map: the spatial-factor value whose
/// marginal distribution function equals that of the score, evaluated
/// through the shorter tail for precision.
fn x3_of_score(ig: &InvGammaFactor, z: f64, family: CopulaFamily) -> f64 {
    match family {
        CopulaFamily::Gaussian => {
            if z <= 0.0 {
                ig.quantile(norm_cdf(z))
            } else {
                ig.quantile_from_sf(norm_sf(z))
            }
        }
        CopulaFamily::StudentT { nu } => {
            if z <= 0.0 {
                ig.quantile(t_cdf(z, nu))
            } else {
                ig.quantile_from_sf(t_sf(z, nu))
            }
        }
    }
}

/// Predictive ensembles at sites outside the fitted set. Per snapshot and
/// time point the stored spatial factors are mapped to copula scores, the
/// new sites' scores are drawn from their exact conditional (Gaussian
/// conditioning; for the t family with a freshly drawn mixing variable),
/// and the new factors feed the same product construction as
/// [`posterior_predict`]. Cells index into `new_sites`.
pub fn predict_new_sites(
    traces: &[ChainTrace],
    stations: &StationSet,
    copula: CopulaFamily,
    new_sites: &NewSites,
    cells: &[(usize, usize)],
    cfg: &PredictConfig,
) -> Result<PredictiveDraws> {
    let snaps = kept_snapshots(traces);
    if snaps.is_empty() {
        return Err(Error::data("no post-burn-in latent snapshots available".to_string()));
    }
    if cfg.replicates_per_draw == 0 {
        return Err(Error::config("replicates_per_draw must be positive".to_string()));
    }
    new_sites.validate(stations.n_covariates())?;
    let n_times = snaps[0].log_x3.nrows();
    validate_cells(cells, n_times, new_sites.coords.len())?;

    let d = stations.n_sites();
    let q = new_sites.coords.len();
    // Cells grouped by time point so each conditional is formed once.
    let mut by_time: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (c, &(t, k)) in cells.iter().enumerate() {
        by_time.entry(t).or_default().push((c, k));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut draws = vec![Vec::with_capacity(snaps.len() * cfg.replicates_per_draw); cells.len()];
    for snap in &snaps {
        let theta = hyper_from_row(&snap.hyper, stations.n_covariates(), copula)?;
        let ig = InvGammaFactor::new(theta.beta3)?;
        let w1 = WeibullFactor::new(theta.beta1)?;
        let corr = build_correlation(stations, theta.rho)?;

        // Cross- and new-site correlation blocks at this snapshot's range.
        let mut sig_on = DMatrix::zeros(d, q);
        for i in 0..d {
            for k in 0..q {
                sig_on[(i, k)] = (-dist(stations.coords()[i], new_sites.coords[k])
                    / theta.rho)
                    .exp();
            }
        }
        let mut sig_nn = DMatrix::identity(q, q);
        for a in 0..q {
            for b in (a + 1)..q {
                let c = (-dist(new_sites.coords[a], new_sites.coords[b]) / theta.rho).exp();
                sig_nn[(a, b)] = c;
                sig_nn[(b, a)] = c;
            }
        }
        // Schur complement S = Σ_nn − Σ_no Σ_oo⁻¹ Σ_on and its factor;
        // a degenerate S (co-located sites) falls back to the mean.
        let mut solved = DMatrix::zeros(d, q);
        for k in 0..q {
            solved.set_column(k, &corr.solve(&DVector::from(sig_on.column(k).into_owned())));
        }
        let mut s = &sig_nn - sig_on.transpose() * &solved;
        for a in 0..q {
            s[(a, a)] += 1e-12;
        }
        let chol_s = Cholesky::new(s);

        // Scale at the new sites from the snapshot's coefficients.
        let mut alpha_new = Vec::with_capacity(q);
        for k in 0..q {
            let mut eta = theta.gamma[0];
            for l in 0..stations.n_covariates() {
                eta += theta.gamma[l + 1] * new_sites.covariates[(k, l)];
            }
            alpha_new.push(eta.exp());
        }

        for (&t, cell_list) in &by_time {
            // Stored factors → copula scores at the fitted sites.
            let z_obs = DVector::from_iterator(
                d,
                (0..d).map(|j| score_of_x3(&ig, snap.log_x3[(t, j)].exp(), copula)),
            );
            let mean = solved.transpose() * &z_obs;
            let x2t = snap.log_x2[t].exp();
            for _ in 0..cfg.replicates_per_draw {
                // Conditional score draw for all new sites jointly.
                let scale = match copula {
                    CopulaFamily::Gaussian => 1.0,
                    CopulaFamily::StudentT { nu } => {
                        let q_o = corr.quad_form(&z_obs);
                        let shape = 0.5 * (nu + d as f64);
                        let rate = 0.5 * (1.0 + q_o / nu);
                        let v = GammaDist::new(shape, 1.0 / rate)
                            .map_err(|e| Error::numerical(format!("mixing draw: {e}")))?
                            .sample(&mut rng);
                        (nu / v).sqrt()
                    }
                };
                let mut z_new = mean.clone();
                if let Some(ch) = &chol_s {
                    let eps = DVector::from_iterator(
                        q,
                        (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    z_new += ch.l() * eps * scale;
                }
                for &(c, k) in cell_list {
                    let x3 = x3_of_score(&ig, z_new[k], copula);
                    draws[c].push(alpha_new[k] * x2t * x3 * w1.sample(&mut rng));
                }
            }
        }
    }
    Ok(PredictiveDraws { cells: cells.to_vec(), draws })
}

/// Empirical tail-dependence estimate at one quantile level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiEstimate {
    /// `P(Y > F_Y⁻¹(u) | X > F_X⁻¹(u))`, estimated with empirical
    /// thresholds; 0 when there are no conditioning exceedances.
    pub chi: f64,
    /// Number of conditioning exceedances behind the estimate.
    pub n_cond: usize,
    /// Binomial Monte Carlo standard error (`∞` when `n_cond = 0`).
    pub mc_se: f64,
    /// Set when fewer than 10 conditioning exceedances support the value.
    pub low_count: bool,
}

/// Empirical `χ(u)` of a paired sample: thresholds are the `⌊un⌋`-th order
/// statistics of each margin and exceedance is strict, which makes the
/// estimator invariant under strictly increasing marginal transforms.
pub fn chi_u_empirical(x: &[f64], y: &[f64], u: f64) -> Result<ChiEstimate> {
    Ok(chi_u_many(x, y, &[u])?.pop().expect("one level requested"))
}

/// [`chi_u_empirical`] at several levels, sorting each margin only once.
pub fn chi_u_many(x: &[f64], y: &[f64], us: &[f64]) -> Result<Vec<ChiEstimate>> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::data(format!(
            "need two equal-length samples of at least 2 pairs, got {} and {}",
            n,
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::data("tail-dependence inputs must be finite".to_string()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let mut out = Vec::with_capacity(us.len());
    for &u in us {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::config(format!("quantile level must lie in (0,1), got {u}")));
        }
        let m = (u * n as f64).floor() as usize;
        if m < 1 {
            return Err(Error::config(format!(
                "level {u} needs at least {} pairs to place a threshold",
                (1.0 / u).ceil()
            )));
        }
        let m = m.min(n);
        let tx = xs[m - 1];
        let ty = ys[m - 1];
        let mut n_cond = 0usize;
        let mut joint = 0usize;
        for i in 0..n {
            if x[i] > tx {
                n_cond += 1;
                if y[i] > ty {
                    joint += 1;
                }
            }
        }
        let chi = if n_cond == 0 { 0.0 } else { joint as f64 / n_cond as f64 };
        let mc_se = if n_cond == 0 {
            f64::INFINITY
        } else {
            (chi * (1.0 - chi) / n_cond as f64).sqrt()
        };
        out.push(ChiEstimate { chi, n_cond, mc_se, low_count: n_cond < 10 });
    }
    Ok(out)
}

/// Model-implied `χ(u)` for a station pair at the given separation,
/// estimated by simulating `n_samples` field replicates under `theta`
/// (which must carry a single intercept coefficient) and applying the
/// empirical estimator.
pub fn chi_u_model(
    theta: &HyperParams,
    separation: f64,
    us: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ChiEstimate>> {
    if theta.gamma.len() != 1 {
        return Err(Error::config(
            "pairwise tail dependence uses a covariate-free model (one coefficient)".to_string(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config(format!("separation must be positive, got {separation}")));
    }
    if n_samples < 100 {
        return Err(Error::config("need at least 100 replicates".to_string()));
    }
    let stations = StationSet::from_coords(vec![[0.0, 0.0], [separation, 0.0]])?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n_samples);
    let mut y = Vec::with_capacity(n_samples);
    let chunk = 65_536;
    let mut left = n_samples;
    while left > 0 {
        let take = left.min(chunk);
        let block = simulate_field_rng(theta, &stations, take, &mut rng)?;
        for t in 0..take {
            x.push(block[(t, 0)]);
            y.push(block[(t, 1)]);
        }
        left -= take;
    }
    chi_u_many(&x, &y, us)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ChainTrace;
    use rand_distr::LogNormal;

    use crate::numeric::quantile_unsorted;

    /// Builds a trace skeleton holding synthetic latent snapshots.
    fn synthetic_trace(
        stations: &StationSet,
        theta: &HyperParams,
        n_times: usize,
        n_snaps: usize,
        seed: u64,
    ) -> ChainTrace {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut hyper = theta.gamma.clone();
        hyper.extend([theta.beta1, theta.beta2, theta.beta3, theta.rho]);
        let corr = build_correlation(stations, theta.rho).unwrap();
        let ig = InvGammaFactor::new(theta.beta3).unwrap();
        let w2 = WeibullFactor::new(theta.beta2).unwrap();
        let d = stations.n_sites();
        let latents = (0..n_snaps)
            .map(|i| {
                let mut log_x3 = DMatrix::zeros(n_times, d);
                let mut log_x2 = Vec::with_capacity(n_times);
                for t in 0..n_times {
                    log_x2.push(w2.sample(&mut rng).ln());
                    let z = corr.sample_scores(&mut rng);
                    for j in 0..d {
                        log_x3[(t, j)] =
                            x3_of_score(&ig, z[j], CopulaFamily::Gaussian).ln();
                    }
                }
                LatentSnapshot { iteration: 1000 + i as u64, hyper: hyper.clone(), log_x2, log_x3 }
            })
            .collect();
        ChainTrace {
            param_names: vec![],
            iterations: vec![],
            draws: vec![],
            latents,
            report: Default::default(),
            step_history: vec![],
            final_steps: Default::default(),
            wall_ms_per_1000: vec![],
            total_wall_ms: 0.0,
            n_iterations: 2000,
            burnin: 500,
        }
    }

    fn test_theta() -> HyperParams {
        HyperParams {
            gamma: vec![0.4],
            beta1: 0.8,
            beta2: 0.7,
            beta3: 5.0,
            rho: 0.5,
            copula: CopulaFamily::Gaussian,
        }
    }

    fn three_stations() -> StationSet {
        StationSet::from_coords(vec![[0.0, 0.0], [0.3, 0.0], [0.1, 0.25]]).unwrap()
    }

    #[test]
    fn stored_latent_prediction_is_deterministic_and_unit_mean() {
        let stations = three_stations();
        let theta = test_theta();
        let trace = synthetic_trace(&stations, &theta, 4, 400, 5);
        let cells = vec![(0, 0), (2, 1), (3, 2)];
        let cfg = PredictConfig { replicates_per_draw: 3, seed: 42 };
        let a = posterior_predict(&[trace.clone()], &stations, theta.copula, &cells, &cfg)
            .unwrap();
        let b = posterior_predict(&[trace.clone()], &stations, theta.copula, &cells, &cfg)
            .unwrap();
        assert_eq!(a, b, "same seed must reproduce the ensemble bitwise");
        assert_eq!(a.cell_draws(0).len(), 400 * 3);

        // E[X1] = 1, so the ensemble mean of draws/m should be close to 1.
        let alpha = crate::model::scale_vector(&theta, &stations).unwrap();
        let snap = &trace.latents[0];
        let m_first = alpha[0] * (snap.log_x2[0] + snap.log_x3[(0, 0)]).exp();
        assert!(m_first > 0.0);
        let mean_ratio: f64 = a
            .cell_draws(0)
            .iter()
            .zip(trace.latents.iter().flat_map(|s| {
                std::iter::repeat(alpha[0] * (s.log_x2[0] + s.log_x3[(0, 0)]).exp()).take(3)
            }))
            .map(|(y, m)| y / m)
            .sum::<f64>()
            / (400.0 * 3.0);
        assert!(
            (mean_ratio - 1.0).abs() < 0.05,
            "scaled predictive mean {mean_ratio} should be near 1"
        );
    }

    #[test]
    fn tiny_shape_weight_collapses_the_observation_factor() {
        // β1 → 0 makes X1 concentrate at its unit mean, so the predictive
        // spread given the latents shrinks toward zero.
        let stations = three_stations();
        let mut theta = test_theta();
        theta.beta1 = 0.01;
        let trace = synthetic_trace(&stations, &theta, 1, 1, 8);
        let cfg = PredictConfig { replicates_per_draw: 4000, seed: 3 };
        let p = posterior_predict(&[trace], &stations, theta.copula, &[(0, 0)], &cfg).unwrap();
        let d = p.cell_draws(0);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(sd / mean < 0.05, "relative spread {} should collapse with β1", sd / mean);
    }

    #[test]
    fn colocated_new_site_recovers_the_stored_site() {
        // A new site on top of fitted site 1 must inherit its conditional
        // scores (Schur complement ≈ 0), so the ensembles agree closely.
        let stations = three_stations();
        let theta = test_theta();
        let trace = synthetic_trace(&stations, &theta, 3, 150, 11);
        let cfg = PredictConfig { replicates_per_draw: 20, seed: 9 };
        let stored = posterior_predict(
            &[trace.clone()],
            &stations,
            theta.copula,
            &[(1, 1)],
            &cfg,
        )
        .unwrap();
        let new_sites = NewSites {
            coords: vec![stations.coords()[1]],
            covariates: DMatrix::zeros(1, 0),
        };
        let extended = predict_new_sites(
            &[trace],
            &stations,
            theta.copula,
            &new_sites,
            &[(1, 0)],
            &cfg,
        )
        .unwrap();
        let med_stored = quantile_unsorted(stored.cell_draws(0), 0.5);
        let med_new = quantile_unsorted(extended.cell_draws(0), 0.5);
        let rel = (med_new - med_stored).abs() / med_stored;
        assert!(
            rel < 0.10,
            "co-located predictive medians differ by {rel:.3} ({med_new} vs {med_stored})"
        );
    }

    #[test]
    fn distant_new_site_reverts_to_the_marginal() {
        // Far from every fitted site the conditional collapses to the
        // marginal: the score ensemble should have roughly unit variance.
        let stations = three_stations();
        let theta = test_theta();
        let trace = synthetic_trace(&stations, &theta, 2, 200, 13);
        let cfg = PredictConfig { replicates_per_draw: 10, seed: 31 };
        let new_sites =
            NewSites { coords: vec![[50.0, 50.0]], covariates: DMatrix::zeros(1, 0) };
        let p = predict_new_sites(&[trace], &stations, theta.copula, &new_sites, &[(0, 0)], &cfg)
            .unwrap();
        // Compare the predictive median against the marginal construction
        // median: α x2 x3 X1 with independent factors. Use the model
        // simulator as the reference.
        let far = StationSet::from_coords(vec![[0.0, 0.0]]).unwrap();
        let reference = simulate_field_rng(
            &theta,
            &far,
            4000,
            &mut ChaCha20Rng::seed_from_u64(77),
        )
        .unwrap();
        let ref_col: Vec<f64> = (0..4000).map(|t| reference[(t, 0)]).collect();
        let med_ref = quantile_unsorted(&ref_col, 0.5);
        let med_new = quantile_unsorted(p.cell_draws(0), 0.5);
        let rel = (med_new - med_ref).abs() / med_ref;
        assert!(rel < 0.25, "distant-site median {med_new} vs marginal {med_ref} (rel {rel:.3})");
    }

    #[test]
    fn prediction_validates_cells_and_snapshots() {
        let stations = three_stations();
        let theta = test_theta();
        let trace = synthetic_trace(&stations, &theta, 2, 5, 1);
        let cfg = PredictConfig::default();
        assert!(
            posterior_predict(&[trace.clone()], &stations, theta.copula, &[(9, 0)], &cfg)
                .is_err()
        );
        assert!(
            posterior_predict(&[trace.clone()], &stations, theta.copula, &[], &cfg).is_err()
        );
        let mut empty = trace;
        empty.latents.clear();
        assert!(posterior_predict(&[empty], &stations, theta.copula, &[(0, 0)], &cfg).is_err());
    }

    #[test]
    fn comonotone_pairs_have_chi_one_at_every_level() {
        let x: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin() + i as f64 * 1e-4).collect();
        for u in [0.8, 0.9, 0.99] {
            let e = chi_u_empirical(&x, &x, u).unwrap();
            assert_eq!(e.chi, 1.0, "identical margins are perfectly tail-dependent");
        }
    }

    #[test]
    fn independent_pairs_have_chi_near_one_minus_u() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let ln = LogNormal::new(0.0, 1.0).unwrap();
        let n = 1_000_000;
        let x: Vec<f64> = (0..n).map(|_| ln.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| ln.sample(&mut rng)).collect();
        let e = chi_u_empirical(&x, &y, 0.9).unwrap();
        assert!(
            (e.chi - 0.1).abs() < 0.01,
            "independent χ(0.9) should be ≈ 0.1, got {}",
            e.chi
        );
        assert!(!e.low_count);
        assert!(e.mc_se < 0.01);
    }

    #[test]
    fn chi_is_invariant_under_monotone_marginal_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let n = 20_000;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.2 * rng.gen::<f64>()).collect();
        let base = chi_u_many(&x, &y, &[0.9, 0.95]).unwrap();
        let xt: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let yt: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        let trans = chi_u_many(&xt, &yt, &[0.9, 0.95]).unwrap();
        for (a, b) in base.iter().zip(&trans) {
            assert_eq!(a.chi, b.chi, "rank statistic must be exactly invariant");
            assert_eq!(a.n_cond, b.n_cond);
        }
    }

    #[test]
    fn sparse_tail_sets_the_low_count_flag() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let e = chi_u_empirical(&x, &x, 0.99).unwrap();
        assert!(e.low_count, "one conditioning exceedance is low-count");
        assert_eq!(e.n_cond, 1);
    }

    #[test]
    fn chi_input_validation() {
        let x = vec![1.0, 2.0, 3.0];
        assert!(chi_u_empirical(&x, &x[..2], 0.9).is_err());
        assert!(chi_u_empirical(&x, &x, 0.0).is_err());
        assert!(chi_u_empirical(&x, &x, 1.0).is_err());
        assert!(chi_u_empirical(&x, &x, 0.05).is_err(), "threshold index would be 0");
        assert!(chi_u_empirical(&[1.0, f64::NAN, 2.0], &x, 0.5).is_err());
    }

    #[test]
    fn model_chi_shows_heavier_t_tail_dependence() {
        let theta_g = HyperParams { gamma: vec![0.0], ..test_theta() };
        let theta_t = HyperParams {
            copula: CopulaFamily::StudentT { nu: 1.0 },
            ..theta_g.clone()
        };
        let n = 200_000;
        let g = chi_u_model(&theta_g, 0.3, &[0.9, 0.99], n, 100).unwrap();
        let t = chi_u_model(&theta_t, 0.3, &[0.9, 0.99], n, 100).unwrap();
        assert!(
            g[1].chi < g[0].chi,
            "Gaussian-copula χ should decay: χ(0.99)={} vs χ(0.9)={}",
            g[1].chi,
            g[0].chi
        );
        assert!(
            t[1].chi > 0.05,
            "Cauchy-tailed copula keeps χ(0.99) bounded away from 0, got {}",
            t[1].chi
        );
        assert!(chi_u_model(&theta_g, 0.0, &[0.9], n, 1).is_err());
    }
}
