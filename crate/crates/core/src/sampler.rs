//! Block sampler for the hierarchical posterior.
//!
//! Hyperparameters are split into four blocks — the scale coefficients, the
//! two Weibull shape weights, and the (inverse-gamma shape, range) pair —
//! and advanced in trajectories of `mh_interval` stochastic-gradient
//! Langevin steps (random-walk steps for the gradient-free block). Each
//! trajectory move is accepted unconditionally; every `mh_interval`
//! iterations a full-data Metropolis–Hastings correction per block either
//! keeps the trajectory endpoint or restores the pre-trajectory anchor.
//! The latent factors are updated by mini-batch MALA with an immediate
//! acceptance step, conditioned on the anchor hyperparameters so each
//! latent move is an exact Metropolis step. Step sizes adapt on a
//! staggered round-robin schedule during burn-in and freeze afterwards.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::copula::{build_correlation, CorrelationModel};
use crate::error::{Error, Result};
use crate::gradients::{grad_hyper_with, x2_value_grad, x3_value_grad, HyperBlock};
use crate::likelihood::{log_posterior_with, LatentState, LikContext, LogPost, PriorSpec};
use crate::model::{ExceedanceDataset, HyperParams, StationSet};
use crate::numeric::LN_2PI;
use crate::transform::{transform, untransform, Bounds, TransformedHyperParams};

const BLOCKS: [HyperBlock; 4] =
    [HyperBlock::Gamma, HyperBlock::Beta1, HyperBlock::Beta2, HyperBlock::Beta3Rho];

/// Proposal step variances: one per hyperparameter block plus the two
/// latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub theta: [f64; 4],
    pub x2: f64,
    pub x3: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { theta: [1e-3, 1e-3, 1e-3, 1e-3], x2: 0.1, x3: 0.1 }
    }
}

impl StepSizes {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta[0]", self.theta[0]),
            ("theta[1]", self.theta[1]),
            ("theta[2]", self.theta[2]),
            ("theta[3]", self.theta[3]),
            ("x2", self.x2),
            ("x3", self.x3),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("step size {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn slot(&self, slot: usize) -> f64 {
        match slot {
            0..=3 => self.theta[slot],
            4 => self.x2,
            5 => self.x3,
            _ => unreachable!(),
        }
    }

    fn set_slot(&mut self, slot: usize, v: f64) {
        match slot {
            0..=3 => self.theta[slot] = v,
            4 => self.x2 = v,
            5 => self.x3 = v,
            _ => unreachable!(),
        }
    }
}

/// Sampler configuration; see field comments for the Algorithm-level roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Mini-batch size `b` (time points per stochastic gradient).
    pub batch_size: usize,
    /// Trajectory length `N_m` between full-data corrections.
    pub mh_interval: u64,
    /// Total iterations `N_tot` (must be a multiple of `mh_interval`).
    pub n_iterations: u64,
    /// Burn-in length `N_bn`; adaptation happens only here, free in the
    /// first half and banded in the second.
    pub burnin: u64,
    /// Iterations between adaptation checkpoints of the round-robin
    /// schedule.
    pub adapt_interval: u64,
    /// Modulation constant of the step-size update
    /// `tau <- exp((P_cur - P_tar)/theta_rate) * tau`.
    pub theta_rate: f64,
    /// Target acceptance rate of the random-walk block.
    pub target_rw: f64,
    /// Target acceptance rate of gradient-based blocks.
    pub target_sgld: f64,
    /// Second-phase no-adaptation band around `target_rw`.
    pub band_rw: (f64, f64),
    /// Second-phase no-adaptation band around `target_sgld`.
    pub band_sgld: (f64, f64),
    /// Initial step variances.
    pub steps: StepSizes,
    /// Parameter-transform bounds (`delta1`, `delta2`, max distance).
    pub bounds: Bounds,
    /// Trace thinning stride (1 records every iteration).
    pub thin: u64,
    /// Latent-snapshot stride for prediction.
    pub latent_thin: u64,
    /// Chain RNG seed.
    pub seed: u64,
    /// Which hyperparameter blocks to update.
    pub update_blocks: [bool; 4],
    /// Whether to update the latent factors.
    pub update_latents: bool,
    /// Abort when the transformed-scale parameter norm exceeds this.
    pub divergence_norm: f64,
}

impl SamplerConfig {
    /// Defaults mirroring the reference simulation protocol: `b = 5`,
    /// `N_m = 25`, adaptation every 500 iterations, targets 0.23 / 0.57.
    #[must_use]
    pub fn new(bounds: Bounds, n_iterations: u64, burnin: u64, seed: u64) -> Self {
        Self {
            batch_size: 5,
            mh_interval: 25,
            n_iterations,
            burnin,
            adapt_interval: 500,
            theta_rate: 1.0,
            target_rw: 0.23,
            target_sgld: 0.57,
            band_rw: (0.15, 0.30),
            band_sgld: (0.50, 0.65),
            steps: StepSizes::default(),
            bounds,
            thin: 1,
            latent_thin: 250,
            seed,
            update_blocks: [true; 4],
            update_latents: true,
            divergence_norm: 1e6,
        }
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        if self.batch_size < 1 || self.batch_size > n_times {
            return Err(Error::config(format!(
                "batch size {} must lie in 1..={n_times}",
                self.batch_size
            )));
        }
        if self.mh_interval < 1 {
            return Err(Error::config("mh_interval must be at least 1".to_string()));
        }
        if self.n_iterations == 0 || self.n_iterations % self.mh_interval != 0 {
            return Err(Error::config(format!(
                "n_iterations {} must be a positive multiple of mh_interval {}",
                self.n_iterations, self.mh_interval
            )));
        }
        if self.burnin > self.n_iterations {
            return Err(Error::config("burn-in cannot exceed the total iterations".to_string()));
        }
        if self.adapt_interval == 0 {
            return Err(Error::config("adapt_interval must be positive".to_string()));
        }
        if !(self.theta_rate > 0.0) {
            return Err(Error::config("theta_rate must be positive".to_string()));
        }
        for (name, p) in [("target_rw", self.target_rw), ("target_sgld", self.target_sgld)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0,1), got {p}")));
            }
        }
        for (name, (lo, hi)) in [("band_rw", self.band_rw), ("band_sgld", self.band_sgld)] {
            if !(lo < hi && lo > 0.0 && hi < 1.0) {
                return Err(Error::config(format!("{name} must be an ordered sub-band of (0,1)")));
            }
        }
        if self.thin == 0 || self.latent_thin == 0 {
            return Err(Error::config("thinning strides must be positive".to_string()));
        }
        if !(self.divergence_norm > 0.0) {
            return Err(Error::config("divergence_norm must be positive".to_string()));
        }
        self.steps.validate()
    }
}

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Init {
    pub theta: HyperParams,
    pub latent: LatentState,
}

impl Init {
    /// Data-driven default: latent factors at 1, intercept at the log mean
    /// of the positive observations, remaining coefficients at 0, shape
    /// weights at the middles of their ranges, the inverse-gamma shape at
    /// its prior mean, and the range at half its upper bound.
    pub fn from_data(
        data: &ExceedanceDataset,
        stations: &StationSet,
        bounds: &Bounds,
        copula: crate::model::CopulaFamily,
        priors: &PriorSpec,
    ) -> Result<Self> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for v in data.y().iter() {
            if v.is_finite() && *v > 0.0 {
                sum += *v;
                count += 1;
            }
        }
        let gamma0 = if count > 0 { (sum / count as f64).ln() } else { 0.0 };
        let mut gamma = vec![0.0; stations.n_covariates() + 1];
        gamma[0] = gamma0;
        let theta = HyperParams {
            gamma,
            beta1: 0.5 * bounds.delta1,
            beta2: 0.5 * bounds.delta2,
            beta3: (priors.beta3_shape / priors.beta3_rate).max(1.5),
            rho: bounds.delta,
            copula,
        };
        theta.validate()?;
        Ok(Self { theta, latent: LatentState::ones(data.n_times(), data.n_sites()) })
    }

    /// Deterministically perturbed variant for overdispersed multi-chain
    /// starts; `chain_index = 0` returns the base point unchanged.
    #[must_use]
    pub fn overdispersed(&self, bounds: &Bounds, chain_index: u64) -> Self {
        if chain_index == 0 {
            return self.clone();
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0x0d15_ea5e ^ chain_index);
        let mut theta = self.theta.clone();
        for g in &mut theta.gamma {
            *g += rng.gen_range(-1.0..1.0);
        }
        theta.beta1 = bounds.delta1 * rng.gen_range(0.15..0.85);
        theta.beta2 = bounds.delta2 * rng.gen_range(0.15..0.85);
        theta.beta3 = 1.0 + (self.theta.beta3 - 1.0) * rng.gen_range(0.2..2.0);
        theta.rho = 2.0 * bounds.delta * rng.gen_range(0.1..0.9);
        Self { theta, latent: self.latent.clone() }
    }
}

/// Proposal/acceptance counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptStats {
    pub proposals: u64,
    pub accepts: u64,
}

impl AcceptStats {
    #[must_use]
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}

/// Acceptance bookkeeping: full-data corrections per hyper block, latent
/// Metropolis steps, and aborted trajectory proposals (non-finite
/// gradients).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub correction: [AcceptStats; 4],
    pub x2: AcceptStats,
    pub x3: AcceptStats,
    pub trajectory_aborts: [u64; 4],
}

/// Thinned latent snapshot, stored with the anchor hyperparameters it was
/// sampled under (natural scale, trace column order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSnapshot {
    pub iteration: u64,
    pub hyper: Vec<f64>,
    pub log_x2: Vec<f64>,
    pub log_x3: DMatrix<f64>,
}

/// Chain output: thinned natural-scale draws, latent snapshots, acceptance
/// counters, step-size history, and wall-clock timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub param_names: Vec<String>,
    pub iterations: Vec<u64>,
    pub draws: Vec<Vec<f64>>,
    pub latents: Vec<LatentSnapshot>,
    pub report: AcceptanceReport,
    pub step_history: Vec<(u64, StepSizes)>,
    pub final_steps: StepSizes,
    pub wall_ms_per_1000: Vec<f64>,
    pub total_wall_ms: f64,
    pub n_iterations: u64,
    pub burnin: u64,
}

impl ChainTrace {
    /// Empty trace ready to receive segments from [`run_chain_segment`].
    #[must_use]
    pub fn new(param_names: Vec<String>, cfg: &SamplerConfig) -> Self {
        Self {
            param_names,
            iterations: Vec::new(),
            draws: Vec::new(),
            latents: Vec::new(),
            report: AcceptanceReport::default(),
            step_history: Vec::new(),
            final_steps: cfg.steps,
            wall_ms_per_1000: Vec::new(),
            total_wall_ms: 0.0,
            n_iterations: cfg.n_iterations,
            burnin: cfg.burnin,
        }
    }

    /// Column index of a named parameter.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// The draws of one parameter after discarding the first
    /// `discard_fraction` of the run (by iteration number, e.g. 0.75).
    #[must_use]
    pub fn kept_column(&self, col: usize, discard_fraction: f64) -> Vec<f64> {
        let cut = (self.n_iterations as f64 * discard_fraction).floor() as u64;
        self.iterations
            .iter()
            .zip(&self.draws)
            .filter(|(it, _)| **it > cut)
            .map(|(_, row)| row[col])
            .collect()
    }
}

/// Natural-scale parameter names in trace column order.
#[must_use]
pub fn param_names(n_gamma: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n_gamma).map(|l| format!("gamma{l}")).collect();
    names.extend(["beta1", "beta2", "beta3", "rho"].map(String::from));
    names
}

fn natural_row(tilde: &TransformedHyperParams, bounds: &Bounds) -> Vec<f64> {
    let theta = untransform(tilde, bounds);
    let mut row = theta.gamma.clone();
    row.extend([theta.beta1, theta.beta2, theta.beta3, theta.rho]);
    row
}

/// Serializable mid-run state: everything needed to continue a chain and
/// reproduce the uninterrupted run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub iteration: u64,
    pub tilde: TransformedHyperParams,
    pub anchor: TransformedHyperParams,
    pub latent: LatentState,
    pub steps: StepSizes,
    pub rng: ChaCha20Rng,
    pub windows: [AcceptStats; 6],
    pub report: AcceptanceReport,
    pub lp_anchor: Option<f64>,
}

/// Drift-plus-noise proposal `N(z + tau*(n/b)/2 * grad, tau * I)`. The
/// `n/b` rescaling is applied here so callers may pass raw mini-batch
/// gradients; pass `n = b` when the gradient is already fully scaled.
pub fn sgld_propose<R: Rng + ?Sized>(
    z: &[f64],
    grad: &[f64],
    tau: f64,
    n: usize,
    b: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mean = sgld_mean(z, grad, tau, n, b)?;
    let sd = tau.sqrt();
    Ok(mean
        .into_iter()
        .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Deterministic drift part of [`sgld_propose`].
pub fn sgld_mean(z: &[f64], grad: &[f64], tau: f64, n: usize, b: usize) -> Result<Vec<f64>> {
    if z.len() != grad.len() {
        return Err(Error::dimension(format!(
            "state ({}) and gradient ({}) lengths differ",
            z.len(),
            grad.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("step size must be positive, got {tau}")));
    }
    if b == 0 || n < b {
        return Err(Error::config(format!("need 1 <= b <= n, got n = {n}, b = {b}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient in proposal drift".to_string()));
    }
    let c = tau * n as f64 / (2.0 * b as f64);
    Ok(z.iter().zip(grad).map(|(zi, gi)| zi + c * gi).collect())
}

/// Log-density of the Gaussian drift kernel `N(to; from + tau/2*grad, tau*I)`.
fn gauss_kernel_logq(to: &[f64], from: &[f64], grad_at_from: &[f64], tau: f64) -> f64 {
    let k = to.len() as f64;
    let mut quad = 0.0;
    for i in 0..to.len() {
        let d = to[i] - from[i] - 0.5 * tau * grad_at_from[i];
        quad += d * d;
    }
    -0.5 * k * (LN_2PI + tau.ln()) - 0.5 * quad / tau
}

/// Step-size adaptation `tau * exp((P_cur - P_tar)/theta_rate)`. When a
/// second-phase `band` is given and the current rate lies inside it, the
/// step is returned unchanged.
pub fn adapt_step(
    tau_cur: f64,
    p_cur: f64,
    p_tar: f64,
    theta_rate: f64,
    band: Option<(f64, f64)>,
) -> f64 {
    if let Some((lo, hi)) = band {
        if p_cur >= lo && p_cur <= hi {
            return tau_cur;
        }
    }
    tau_cur * ((p_cur - p_tar) / theta_rate).exp()
}

/// Full-data Metropolis–Hastings ratio between two transformed-scale
/// hyperparameter states, given the log proposal densities of the forward
/// and backward moves. Rejection sentinels map to a ratio of 0 (proposal
/// inadmissible) or +∞ (escape from an inadmissible state).
#[allow(clippy::too_many_arguments)]
pub fn mh_ratio_hyper(
    tilde_cur: &TransformedHyperParams,
    tilde_prop: &TransformedHyperParams,
    latent: &LatentState,
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    bounds: &Bounds,
    log_q_forward: f64,
    log_q_backward: f64,
) -> Result<f64> {
    let lp_cur = crate::likelihood::log_posterior(tilde_cur, latent, data, stations, priors, bounds)?;
    let lp_prop =
        crate::likelihood::log_posterior(tilde_prop, latent, data, stations, priors, bounds)?;
    Ok(match (lp_cur, lp_prop) {
        (_, LogPost::Reject) => 0.0,
        (LogPost::Reject, LogPost::Finite(_)) => f64::INFINITY,
        (LogPost::Finite(c), LogPost::Finite(p)) => {
            (p - c + log_q_backward - log_q_forward).exp()
        }
    })
}

/// MALA acceptance ratio for a block proposal on the time-factor
/// coordinates of `batch`; the proposal must have step variance `tau`.
/// Terms for time points outside the batch cancel and are not evaluated.
pub fn mh_ratio_latent_x2(
    theta: &HyperParams,
    latent: &LatentState,
    proposal_log_x2: &[f64],
    data: &ExceedanceDataset,
    stations: &StationSet,
    batch: &[usize],
    tau: f64,
) -> Result<f64> {
    latent.check_dims(data)?;
    if proposal_log_x2.len() != batch.len() {
        return Err(Error::dimension(format!(
            "proposal has {} coordinates but the batch has {}",
            proposal_log_x2.len(),
            batch.len()
        )));
    }
    let ctx = LikContext::new(theta, stations, data)?;
    let (val_c, grad_c) = x2_value_grad(&ctx, latent, batch);
    let mut prop_state = latent.clone();
    for (i, &t) in batch.iter().enumerate() {
        prop_state.log_x2[t] = proposal_log_x2[i];
    }
    let (val_p, grad_p) = x2_value_grad(&ctx, &prop_state, batch);
    if !val_p.is_finite() {
        return Ok(0.0);
    }
    let cur: Vec<f64> = batch.iter().map(|&t| latent.log_x2[t]).collect();
    let log_q_fwd = gauss_kernel_logq(proposal_log_x2, &cur, &grad_c, tau);
    let log_q_bwd = gauss_kernel_logq(&cur, proposal_log_x2, &grad_p, tau);
    Ok((val_p - val_c + log_q_bwd - log_q_fwd).exp())
}

/// MALA acceptance ratio for a block proposal on the spatial-factor rows of
/// `batch` (`batch.len() × d` proposal matrix).
pub fn mh_ratio_latent_x3(
    theta: &HyperParams,
    latent: &LatentState,
    proposal_log_x3: &DMatrix<f64>,
    data: &ExceedanceDataset,
    stations: &StationSet,
    batch: &[usize],
    tau: f64,
) -> Result<f64> {
    latent.check_dims(data)?;
    if proposal_log_x3.nrows() != batch.len() || proposal_log_x3.ncols() != data.n_sites() {
        return Err(Error::dimension(format!(
            "proposal is {}×{} but the batch needs {}×{}",
            proposal_log_x3.nrows(),
            proposal_log_x3.ncols(),
            batch.len(),
            data.n_sites()
        )));
    }
    let ctx = LikContext::new(theta, stations, data)?;
    let corr = build_correlation(stations, theta.rho)?;
    let (val_c, grad_c) = x3_value_grad(&ctx, &corr, latent, batch);
    let mut prop_state = latent.clone();
    for (i, &t) in batch.iter().enumerate() {
        for j in 0..data.n_sites() {
            prop_state.log_x3[(t, j)] = proposal_log_x3[(i, j)];
        }
    }
    let (val_p, grad_p) = x3_value_grad(&ctx, &corr, &prop_state, batch);
    if !val_p.is_finite() {
        return Ok(0.0);
    }
    let cur: Vec<f64> = batch.iter().flat_map(|&t| latent_row_vec(latent, t)).collect();
    let prop_flat: Vec<f64> = flatten_rows(proposal_log_x3);
    let log_q_fwd = gauss_kernel_logq(&prop_flat, &cur, &flatten_rows(&grad_c), tau);
    let log_q_bwd = gauss_kernel_logq(&cur, &prop_flat, &flatten_rows(&grad_p), tau);
    Ok((val_p - val_c + log_q_bwd - log_q_fwd).exp())
}

fn latent_row_vec(latent: &LatentState, t: usize) -> Vec<f64> {
    (0..latent.log_x3.ncols()).map(|j| latent.log_x3[(t, j)]).collect()
}

fn flatten_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn block_values(t: &TransformedHyperParams, block: usize) -> Vec<f64> {
    match block {
        0 => t.gamma.clone(),
        1 => vec![t.beta1_t],
        2 => vec![t.beta2_t],
        3 => vec![t.beta3_t, t.rho_t],
        _ => unreachable!(),
    }
}

fn set_block_values(t: &mut TransformedHyperParams, block: usize, v: &[f64]) {
    match block {
        0 => t.gamma.copy_from_slice(v),
        1 => t.beta1_t = v[0],
        2 => t.beta2_t = v[0],
        3 => {
            t.beta3_t = v[0];
            t.rho_t = v[1];
        }
        _ => unreachable!(),
    }
}

fn tilde_norm(t: &TransformedHyperParams) -> f64 {
    let mut s: f64 = t.gamma.iter().map(|g| g * g).sum();
    s += t.beta1_t * t.beta1_t + t.beta2_t * t.beta2_t + t.beta3_t * t.beta3_t + t.rho_t * t.rho_t;
    s.sqrt()
}

struct Env<'a> {
    data: &'a ExceedanceDataset,
    stations: &'a StationSet,
    priors: &'a PriorSpec,
    cfg: &'a SamplerConfig,
    full_batch: Vec<usize>,
}

impl<'a> Env<'a> {
    fn full_lp(
        &self,
        tilde: &TransformedHyperParams,
        latent: &LatentState,
        corr: &CorrelationModel,
    ) -> Result<LogPost> {
        let theta = untransform(tilde, &self.cfg.bounds);
        log_posterior_with(
            tilde,
            &theta,
            latent,
            self.data,
            self.stations,
            self.priors,
            &self.cfg.bounds,
            corr,
        )
    }

    /// Full-data gradient of one gradient block (scale `n/n = 1`, prior and
    /// Jacobian included once).
    fn full_grad(
        &self,
        tilde: &TransformedHyperParams,
        latent: &LatentState,
        block: usize,
    ) -> Result<Vec<f64>> {
        let theta = untransform(tilde, &self.cfg.bounds);
        let ctx = LikContext::new(&theta, self.stations, self.data)?;
        grad_hyper_with(
            tilde,
            &theta,
            &ctx,
            latent,
            self.stations,
            self.priors,
            &self.cfg.bounds,
            BLOCKS[block],
            &self.full_batch,
        )
    }
}

/// Runs a complete chain: `n_iterations` iterations from `init`, returning
/// the trace and the final restartable state.
pub fn run_chain(
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    init: &Init,
) -> Result<(ChainTrace, ChainState)> {
    let mut state = init_state(data, stations, priors, config, init)?;
    let mut trace = ChainTrace::new(param_names(stations.n_covariates() + 1), config);
    run_chain_segment(data, stations, priors, config, &mut state, &mut trace, config.n_iterations)?;
    Ok((trace, state))
}

/// Builds the initial [`ChainState`] for a chain (iteration 0).
pub fn init_state(
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    init: &Init,
) -> Result<ChainState> {
    config.validate(data.n_times())?;
    priors.validate()?;
    init.latent.check_dims(data)?;
    init.theta.validate()?;
    if init.theta.gamma.len() != stations.n_covariates() + 1 {
        return Err(Error::dimension(format!(
            "init has {} scale coefficients but the stations carry {} covariates",
            init.theta.gamma.len(),
            stations.n_covariates()
        )));
    }
    let tilde = transform(&init.theta, &config.bounds)?;
    Ok(ChainState {
        iteration: 0,
        tilde: tilde.clone(),
        anchor: tilde,
        latent: init.latent.clone(),
        steps: config.steps,
        rng: ChaCha20Rng::seed_from_u64(config.seed),
        windows: [AcceptStats::default(); 6],
        report: AcceptanceReport::default(),
        lp_anchor: None,
    })
}

/// Advances a chain from `state.iteration` up to `upto` (inclusive),
/// appending to `trace`. Calling this in segments produces bit-identical
/// results to a single uninterrupted run, which is what makes checkpoint
/// files trustworthy.
pub fn run_chain_segment(
    data: &ExceedanceDataset,
    stations: &StationSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    state: &mut ChainState,
    trace: &mut ChainTrace,
    upto: u64,
) -> Result<()> {
    config.validate(data.n_times())?;
    if upto > config.n_iterations || state.iteration >= upto {
        return Err(Error::config(format!(
            "segment end {upto} must lie in ({}, {}]",
            state.iteration, config.n_iterations
        )));
    }
    let env = Env {
        data,
        stations,
        priors,
        cfg: config,
        full_batch: (0..data.n_times()).collect(),
    };
    let n = data.n_times();
    let d = data.n_sites();

    // Anchor-state caches: correlation at the anchor range and the
    // full-data log-posterior at (anchor, latent), updated incrementally.
    let mut corr = {
        let theta = untransform(&state.anchor, &config.bounds);
        build_correlation(stations, theta.rho)?
    };
    let mut anchor_theta = untransform(&state.anchor, &config.bounds);
    if state.lp_anchor.is_none() {
        state.lp_anchor = match env.full_lp(&state.anchor, &state.latent, &corr)? {
            LogPost::Finite(v) => Some(v),
            LogPost::Reject => {
                return Err(Error::numerical(
                    "initial state has an inadmissible posterior value".to_string(),
                ))
            }
        };
    }

    let t_start = Instant::now();
    let mut last_mark = Instant::now();

    while state.iteration < upto {
        let g = state.iteration + 1;

        // One shared mini-batch per inner iteration (without replacement).
        let batch: Vec<usize> = if config.batch_size == n {
            env.full_batch.clone()
        } else {
            let mut idx: Vec<usize> =
                index_sample(&mut state.rng, n, config.batch_size).into_iter().collect();
            idx.sort_unstable();
            idx
        };

        // Hyperparameter trajectories: stochastic-gradient steps for the
        // three gradient blocks, random-walk steps for the fourth; all
        // accepted unconditionally (the correction comes later). A
        // non-finite gradient (or an inadmissible trajectory point) aborts
        // that block's step for this iteration.
        let traj_theta = untransform(&state.tilde, &config.bounds);
        let traj_ctx = LikContext::new(&traj_theta, stations, data).ok();
        for k in 0..3 {
            if !config.update_blocks[k] {
                continue;
            }
            let grad = traj_ctx.as_ref().and_then(|ctx| {
                grad_hyper_with(
                    &state.tilde,
                    &traj_theta,
                    ctx,
                    &state.latent,
                    stations,
                    priors,
                    &config.bounds,
                    BLOCKS[k],
                    &batch,
                )
                .ok()
                .filter(|gv| gv.iter().all(|x| x.is_finite()))
            });
            match grad {
                Some(gv) => {
                    let cur = block_values(&state.tilde, k);
                    let prop =
                        sgld_propose(&cur, &gv, state.steps.theta[k], 1, 1, &mut state.rng)?;
                    set_block_values(&mut state.tilde, k, &prop);
                }
                None => state.report.trajectory_aborts[k] += 1,
            }
        }
        if config.update_blocks[3] {
            let sd = state.steps.theta[3].sqrt();
            let cur = block_values(&state.tilde, 3);
            let prop: Vec<f64> = cur
                .iter()
                .map(|c| c + sd * state.rng.sample::<f64, _>(StandardNormal))
                .collect();
            set_block_values(&mut state.tilde, 3, &prop);
        }
        let norm = tilde_norm(&state.tilde);
        if !(norm <= config.divergence_norm) {
            return Err(Error::numerical(format!(
                "divergence at iteration {g}: transformed-scale norm {norm} exceeds {}",
                config.divergence_norm
            )));
        }

        // Latent block-MALA with immediate acceptance, conditioned on the
        // anchor hyperparameters (the exact chain values) so each move is a
        // Metropolis step with the cached correlation factorization.
        if config.update_latents {
            let anchor_ctx = LikContext::new(&anchor_theta, stations, data)?;
            update_x2_block(state, &anchor_ctx, &batch);
            update_x3_block(state, &anchor_ctx, &corr, &batch, d);
        }

        // Full-data correction of each hyper block at the trajectory end.
        if g % config.mh_interval == 0 {
            correction_cycle(&env, state, &mut corr, &mut anchor_theta)?;
        }

        // Staggered step-size adaptation during burn-in.
        if g <= config.burnin && g % config.adapt_interval == 0 {
            let slot = ((g / config.adapt_interval - 1) % 6) as usize;
            adapt_slot(state, config, trace, g, slot);
        }

        state.iteration = g;

        if g % config.thin == 0 {
            trace.iterations.push(g);
            trace.draws.push(natural_row(&state.tilde, &config.bounds));
        }
        if g % config.latent_thin == 0 {
            trace.latents.push(LatentSnapshot {
                iteration: g,
                hyper: natural_row(&state.anchor, &config.bounds),
                log_x2: state.latent.log_x2.clone(),
                log_x3: state.latent.log_x3.clone(),
            });
        }
        if g % 1000 == 0 {
            trace.wall_ms_per_1000.push(last_mark.elapsed().as_secs_f64() * 1e3);
            last_mark = Instant::now();
        }
    }

    trace.report = state.report;
    trace.final_steps = state.steps;
    trace.total_wall_ms += t_start.elapsed().as_secs_f64() * 1e3;
    Ok(())
}

/// One time-factor MALA block move; updates `lp_anchor` incrementally on
/// acceptance.
fn update_x2_block(state: &mut ChainState, ctx: &LikContext, batch: &[usize]) {
    let tau = state.steps.x2;
    let (val_c, grad_c) = x2_value_grad(ctx, &state.latent, batch);
    if !val_c.is_finite() || grad_c.iter().any(|g| !g.is_finite()) {
        return;
    }
    state.report.x2.proposals += 1;
    let cur: Vec<f64> = batch.iter().map(|&t| state.latent.log_x2[t]).collect();
    let sd = tau.sqrt();
    let prop: Vec<f64> = cur
        .iter()
        .zip(&grad_c)
        .map(|(c, g)| c + 0.5 * tau * g + sd * state.rng.sample::<f64, _>(StandardNormal))
        .collect();
    let u: f64 = state.rng.gen();
    for (i, &t) in batch.iter().enumerate() {
        state.latent.log_x2[t] = prop[i];
    }
    let (val_p, grad_p) = x2_value_grad(ctx, &state.latent, batch);
    let mut accept = false;
    if val_p.is_finite() && grad_p.iter().all(|g| g.is_finite()) {
        let log_r = val_p - val_c + gauss_kernel_logq(&cur, &prop, &grad_p, tau)
            - gauss_kernel_logq(&prop, &cur, &grad_c, tau);
        accept = u.ln() < log_r;
    }
    if accept {
        state.report.x2.accepts += 1;
        state.windows[4].accepts += 1;
        if let Some(lp) = state.lp_anchor.as_mut() {
            *lp += val_p - val_c;
        }
    } else {
        for (i, &t) in batch.iter().enumerate() {
            state.latent.log_x2[t] = cur[i];
        }
    }
    state.windows[4].proposals += 1;
}

/// One spatial-factor MALA block move (all sites of the batch rows jointly).
fn update_x3_block(
    state: &mut ChainState,
    ctx: &LikContext,
    corr: &CorrelationModel,
    batch: &[usize],
    d: usize,
) {
    let tau = state.steps.x3;
    let (val_c, grad_c) = x3_value_grad(ctx, corr, &state.latent, batch);
    if !val_c.is_finite() || grad_c.iter().any(|g| !g.is_finite()) {
        return;
    }
    state.report.x3.proposals += 1;
    let cur: Vec<f64> = batch.iter().flat_map(|&t| latent_row_vec(&state.latent, t)).collect();
    let grad_c_flat = flatten_rows(&grad_c);
    let sd = tau.sqrt();
    let prop: Vec<f64> = cur
        .iter()
        .zip(&grad_c_flat)
        .map(|(c, g)| c + 0.5 * tau * g + sd * state.rng.sample::<f64, _>(StandardNormal))
        .collect();
    let u: f64 = state.rng.gen();
    for (i, &t) in batch.iter().enumerate() {
        for j in 0..d {
            state.latent.log_x3[(t, j)] = prop[i * d + j];
        }
    }
    let (val_p, grad_p) = x3_value_grad(ctx, corr, &state.latent, batch);
    let mut accept = false;
    if val_p.is_finite() && grad_p.iter().all(|g| g.is_finite()) {
        let grad_p_flat = flatten_rows(&grad_p);
        let log_r = val_p - val_c + gauss_kernel_logq(&cur, &prop, &grad_p_flat, tau)
            - gauss_kernel_logq(&prop, &cur, &grad_c_flat, tau);
        accept = u.ln() < log_r;
    }
    if accept {
        state.report.x3.accepts += 1;
        state.windows[5].accepts += 1;
        if let Some(lp) = state.lp_anchor.as_mut() {
            *lp += val_p - val_c;
        }
    } else {
        for (i, &t) in batch.iter().enumerate() {
            for j in 0..d {
                state.latent.log_x3[(t, j)] = cur[i * d + j];
            }
        }
    }
    state.windows[5].proposals += 1;
}

/// Full-data Metropolis–Hastings correction of each updated hyper block.
/// Block `k`'s proposal is its trajectory endpoint; blocks already decided
/// keep their outcome, blocks not yet decided stay at the anchor. On
/// rejection the anchor value is restored. Afterwards both the anchor and
/// the trajectory state are reset to the corrected vector.
fn correction_cycle(
    env: &Env,
    state: &mut ChainState,
    corr: &mut CorrelationModel,
    anchor_theta: &mut HyperParams,
) -> Result<()> {
    let cfg = env.cfg;
    let mut work = state.anchor.clone();
    let mut lp_cur = state
        .lp_anchor
        .expect("anchor log-posterior is initialized before the first correction");

    for k in 0..4 {
        if !cfg.update_blocks[k] {
            continue;
        }
        let prop_k = block_values(&state.tilde, k);
        let cur_k = block_values(&work, k);
        let mut candidate = work.clone();
        set_block_values(&mut candidate, k, &prop_k);

        // The range parameter changes the correlation matrix; factorize
        // once per proposal and keep the factorization only on acceptance.
        let mut prop_corr: Option<CorrelationModel> = None;
        let lp_prop = if k == 3 {
            let theta_cand = untransform(&candidate, &cfg.bounds);
            match build_correlation(env.stations, theta_cand.rho) {
                Ok(c) => {
                    let lp = env.full_lp(&candidate, &state.latent, &c)?;
                    prop_corr = Some(c);
                    lp
                }
                Err(_) => LogPost::Reject,
            }
        } else {
            env.full_lp(&candidate, &state.latent, corr)?
        };

        let log_r = match lp_prop {
            LogPost::Reject => f64::NEG_INFINITY,
            LogPost::Finite(lp_p) => {
                let (log_q_fwd, log_q_bwd) = if k < 3 {
                    // Endpoint drift kernels with full-data gradients.
                    let g_cur = env.full_grad(&work, &state.latent, k)?;
                    let g_prop = env.full_grad(&candidate, &state.latent, k)?;
                    if g_cur.iter().chain(&g_prop).any(|x| !x.is_finite()) {
                        (0.0, f64::NEG_INFINITY)
                    } else {
                        (
                            gauss_kernel_logq(&prop_k, &cur_k, &g_cur, state.steps.theta[k]),
                            gauss_kernel_logq(&cur_k, &prop_k, &g_prop, state.steps.theta[k]),
                        )
                    }
                } else {
                    (0.0, 0.0) // symmetric random walk
                };
                lp_p - lp_cur + log_q_bwd - log_q_fwd
            }
        };

        let u: f64 = state.rng.gen();
        let accept = u.ln() < log_r;
        state.report.correction[k].proposals += 1;
        state.windows[k].proposals += 1;
        if accept {
            state.report.correction[k].accepts += 1;
            state.windows[k].accepts += 1;
            set_block_values(&mut work, k, &prop_k);
            if let LogPost::Finite(lp_p) = lp_prop {
                lp_cur = lp_p;
            }
            if let Some(c) = prop_corr {
                *corr = c;
            }
        }
    }

    state.anchor = work.clone();
    state.tilde = work;
    state.lp_anchor = Some(lp_cur);
    *anchor_theta = untransform(&state.anchor, &cfg.bounds);
    Ok(())
}

/// Applies the round-robin adaptation rule for one step-size slot
/// (0–3 hyper blocks, 4 = x2, 5 = x3) and resets its window.
fn adapt_slot(
    state: &mut ChainState,
    cfg: &SamplerConfig,
    trace: &mut ChainTrace,
    g: u64,
    slot: usize,
) {
    let window = state.windows[slot];
    state.windows[slot] = AcceptStats::default();
    if window.proposals == 0 {
        return;
    }
    let p_cur = window.rate();
    let (p_tar, band) = if slot == 3 {
        (cfg.target_rw, cfg.band_rw)
    } else {
        (cfg.target_sgld, cfg.band_sgld)
    };
    let phase2 = g > cfg.burnin / 2;
    let tau_new = adapt_step(
        state.steps.slot(slot),
        p_cur,
        p_tar,
        cfg.theta_rate,
        if phase2 { Some(band) } else { None },
    );
    state.steps.set_slot(slot, tau_new);
    trace.step_history.push((g, state.steps));
}
