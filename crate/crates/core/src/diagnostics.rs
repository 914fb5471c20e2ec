//! Convergence and efficiency diagnostics for MCMC output.

use crate::error::{Error, Result};

/// Effective sample size of one chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssResult {
    /// Estimated number of independent draws.
    pub ess: f64,
    /// Integrated autocorrelation time (1 for white noise).
    pub tau_int: f64,
    /// Set when the chain is (numerically) constant, in which case `ess`
    /// is reported as 0 rather than a misleading large value.
    pub degenerate: bool,
}

/// Effective sample size from the initial-positive-sequence estimator:
/// autocorrelations are summed in adjacent pairs
/// `Γ_m = ρ(2m) + ρ(2m+1)` and truncated at the first non-positive pair,
/// giving `τ = 2 Σ Γ_m − 1` and `ESS = n/τ`. Needs at least 10 draws.
pub fn ess(x: &[f64]) -> Result<EssResult> {
    let n = x.len();
    if n < 10 {
        return Err(Error::data(format!("need at least 10 draws for an ESS estimate, got {n}")));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let scale = x.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    if c0 <= (1e-14 * scale).powi(2) {
        return Ok(EssResult { ess: 0.0, tau_int: f64::INFINITY, degenerate: true });
    }

    // Biased autocovariance at lag k (standard for this estimator).
    let acov = |k: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - k {
            s += (x[t] - mean) * (x[t + k] - mean);
        }
        s / nf
    };

    let max_pairs = ((n - 1) / 2).min(20_000);
    let mut sum_pairs = 0.0;
    for m in 0..max_pairs {
        let gamma = (acov(2 * m) + acov(2 * m + 1)) / c0;
        if gamma <= 0.0 {
            break;
        }
        sum_pairs += gamma;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / nf);
    Ok(EssResult { ess: nf / tau, tau_int: tau, degenerate: false })
}

/// Split-chain potential scale reduction factor. Each chain is halved, the
/// within-half variance `W` and between-half variance of means are pooled,
/// and `R̂ = sqrt(((n−1)/n · W + B/n) / W)`. Values near 1 indicate the
/// chains agree; the conventional mixing threshold is 1.1. Chains that are
/// all constant and equal return exactly 1.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::data(format!(
            "split R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::data("chains must have equal lengths".to_string()));
    }
    if len < 4 {
        return Err(Error::data(format!("chains of length {len} are too short to split")));
    }
    let half = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[len - half..]);
    }

    let n = half as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return Ok(if b_over_n <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Sampling efficiency as effective draws per minute of wall-clock time.
pub fn ess_per_minute(ess: f64, wall_minutes: f64) -> Result<f64> {
    if !(wall_minutes > 0.0) {
        return Err(Error::config(format!("wall time must be positive, got {wall_minutes} min")));
    }
    Ok(ess / wall_minutes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn white_noise_ess_is_near_the_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = ess(&x).unwrap();
        assert!(!r.degenerate);
        assert!(
            r.ess > 0.8 * n as f64 && r.ess < 1.2 * n as f64,
            "white-noise ESS {} should be close to {n}",
            r.ess
        );
    }

    #[test]
    fn ar1_ess_matches_the_analytic_autocorrelation_time() {
        // AR(1) with coefficient 0.9 has τ = (1+φ)/(1−φ) = 19.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let phi: f64 = 0.9;
        let innov_sd = (1.0 - phi * phi).sqrt();
        let mut x = Vec::with_capacity(n);
        let mut cur = 0.0;
        for _ in 0..n {
            cur = phi * cur + innov_sd * rng.sample::<f64, _>(StandardNormal);
            x.push(cur);
        }
        let r = ess(&x).unwrap();
        let expect = n as f64 / 19.0;
        assert!(
            (r.ess - expect).abs() < 0.2 * expect,
            "AR(1) ESS {} should be within 20% of {expect}",
            r.ess
        );
    }

    #[test]
    fn constant_chain_is_flagged_degenerate() {
        let x = vec![3.25; 500];
        let r = ess(&x).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.ess, 0.0);
    }

    #[test]
    fn short_chains_are_rejected() {
        assert!(ess(&[1.0; 9]).is_err());
        assert!(ess(&[1.0; 10]).is_ok());
    }

    #[test]
    fn rhat_near_one_for_iid_chains_and_large_for_shifted_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> {
            (0..5_000).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let a = draw(&mut rng, 0.0);
        let b = draw(&mut rng, 0.0);
        let r = gelman_rubin(&[a.clone(), b]).unwrap();
        assert!(r < 1.02, "matched chains should give R-hat near 1, got {r}");

        let c = draw(&mut rng, 3.0);
        let r2 = gelman_rubin(&[a, c]).unwrap();
        assert!(r2 > 1.5, "separated chains should inflate R-hat, got {r2}");
    }

    #[test]
    fn splitting_detects_within_chain_drift() {
        // Two identical trending chains: unsplit means agree perfectly, but
        // each chain's halves do not — the split statistic must flag it.
        let ramp: Vec<f64> = (0..2_000).map(|i| i as f64 / 2_000.0).collect();
        let r = gelman_rubin(&[ramp.clone(), ramp]).unwrap();
        assert!(r > 1.5, "drifting chains should inflate split R-hat, got {r}");
    }

    #[test]
    fn constant_equal_chains_give_rhat_one() {
        let r = gelman_rubin(&[vec![2.0; 100], vec![2.0; 100]]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn rhat_input_validation() {
        assert!(gelman_rubin(&[vec![1.0; 100]]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 100], vec![1.0; 99]]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 3], vec![1.0; 3]]).is_err());
    }

    #[test]
    fn ess_per_minute_scales() {
        assert_eq!(ess_per_minute(300.0, 1.5).unwrap(), 200.0);
        assert!(ess_per_minute(300.0, 0.0).is_err());
    }
}
