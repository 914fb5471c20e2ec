//! Tail-index estimation.

use crate::error::{Error, Result};

/// Hill estimator of the tail index from the `k` largest observations:
/// the mean of `log(x_(n−i+1) / x_(n−k))` over the top `k` order statistics.
///
/// Requires `1 ≤ k < n` and a positive `k+1`-th largest value.
pub fn hill_estimator(data: &[f64], k: usize) -> Result<f64> {
    let n = data.len();
    if k == 0 || k >= n {
        return Err(Error::domain(format!(
            "Hill estimator needs 1 ≤ k < n, got k={k} with n={n}"
        )));
    }
    if data.iter().any(|x| x.is_nan()) {
        return Err(Error::data("Hill estimator input contains NaN"));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let x_k = sorted[k];
    if x_k <= 0.0 {
        return Err(Error::domain(
            "Hill estimator needs the k+1 largest observations to be positive",
        ));
    }
    let sum: f64 = sorted[..k].iter().map(|&x| (x / x_k).ln()).sum();
    Ok(sum / k as f64)
}
