//! Site-wise censoring thresholds and assembly of the censored dataset.
//!
//! Each site's threshold is the type-7 empirical quantile of its observed
//! values (optionally restricted to strictly positive values, the natural
//! choice for precipitation-like data with many exact zeros). Missing cells
//! and held-out (masked) sites receive an infinite threshold, which the
//! model treats as "no information".

use anyhow::{bail, Result};
use nalgebra::DMatrix;
use prodmix::numeric::quantile_type7;
use prodmix::ExceedanceDataset;

/// Thresholded dataset plus per-site reporting detail.
#[derive(Debug, Clone)]
pub struct ThresholdedData {
    pub dataset: ExceedanceDataset,
    /// One entry per site; `None` for masked sites (including auto-masked
    /// all-missing sites).
    pub thresholds: Vec<Option<f64>>,
    /// Sites masked on request or because they had no observations at all.
    pub masked: Vec<bool>,
    pub n_exceedances: usize,
    pub n_censored: usize,
}

/// Computes one site's threshold from its non-missing values.
///
/// Returns `None` when the site has no usable values (no observations, or no
/// positive observations under `positive_only`).
pub fn site_threshold(values: &[f64], quantile: f64, positive_only: bool) -> Option<f64> {
    let mut pool: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan() && (!positive_only || *v > 0.0))
        .collect();
    if pool.is_empty() {
        return None;
    }
    pool.sort_unstable_by(|a, b| a.partial_cmp(b).expect("NaN filtered above"));
    Some(quantile_type7(&pool, quantile))
}

/// Builds the censored dataset from a raw observation matrix (NaN = missing).
///
/// `mask` flags sites to hold out entirely: every cell of a masked site gets
/// an infinite threshold and its observations are withheld from the model.
/// A site with no observations at all is auto-masked. A non-masked site
/// whose pool of threshold-eligible values is empty is an error naming the
/// site, because a finite threshold cannot be formed for it.
pub fn build_thresholds(
    raw: &DMatrix<f64>,
    station_ids: &[String],
    quantile: f64,
    positive_only: bool,
    mask: &[bool],
) -> Result<ThresholdedData> {
    let (n, d) = raw.shape();
    if station_ids.len() != d || mask.len() != d {
        bail!(
            "threshold builder got {} sites but {} ids and {} mask flags",
            d,
            station_ids.len(),
            mask.len()
        );
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        bail!("censoring quantile must lie strictly inside (0, 1), got {quantile}");
    }

    let mut thresholds = vec![None; d];
    let mut masked = mask.to_vec();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|t| raw[(t, j)]).collect();
        if masked[j] {
            continue;
        }
        if col.iter().all(|v| v.is_nan()) {
            masked[j] = true; // nothing observed: hold the site out
            continue;
        }
        match site_threshold(&col, quantile, positive_only) {
            Some(thr) => thresholds[j] = Some(thr),
            None => bail!(
                "station '{}' has observations but no positive values; cannot set a \
                 positive-only threshold (set positive_only = false or mask the station)",
                station_ids[j]
            ),
        }
    }

    let mut y = DMatrix::from_element(n, d, f64::NAN);
    let mut u = DMatrix::from_element(n, d, f64::INFINITY);
    let mut n_exceedances = 0usize;
    let mut n_censored = 0usize;
    for j in 0..d {
        let Some(thr) = thresholds[j] else { continue };
        for t in 0..n {
            let v = raw[(t, j)];
            if v.is_nan() {
                continue; // missing cell keeps u = ∞, y = NaN
            }
            y[(t, j)] = v;
            u[(t, j)] = thr;
            if v > thr {
                n_exceedances += 1;
            } else {
                n_censored += 1;
            }
        }
    }

    let dataset = ExceedanceDataset::new(y, u)
        .map_err(|e| anyhow::anyhow!("dataset assembly failed: {e}"))?;
    Ok(ThresholdedData { dataset, thresholds, masked, n_exceedances, n_censored })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("S{j}")).collect()
    }

    #[test]
    fn type7_quantile_of_1_to_100_at_75_percent() {
        let col: Vec<f64> = (1..=100).map(f64::from).collect();
        let raw = DMatrix::from_fn(100, 1, |t, _| col[t]);
        let out = build_thresholds(&raw, &ids(1), 0.75, false, &[false]).unwrap();
        assert_eq!(out.thresholds[0], Some(75.25));
        assert_eq!(out.n_exceedances, 25);
        assert_eq!(out.n_censored, 75);
    }

    #[test]
    fn positive_only_ignores_zeros() {
        // 70% zeros; the positive pool is 1..=30 so the 0.75 threshold comes
        // from those 30 values alone.
        let mut vals = vec![0.0; 70];
        vals.extend((1..=30).map(f64::from));
        let raw = DMatrix::from_fn(100, 1, |t, _| vals[t]);
        let out = build_thresholds(&raw, &ids(1), 0.75, true, &[false]).unwrap();
        let expected = quantile_type7(&(1..=30).map(f64::from).collect::<Vec<_>>(), 0.75);
        assert_eq!(out.thresholds[0], Some(expected));
        // All zeros are censored cells below the positive threshold.
        assert_eq!(out.n_exceedances + out.n_censored, 100);
        assert!(!out.dataset.is_exceedance(0, 0));
    }

    #[test]
    fn masked_and_all_missing_sites_get_infinite_thresholds() {
        let raw = DMatrix::from_fn(4, 3, |t, j| match j {
            0 => (t + 1) as f64,
            1 => (t + 2) as f64,
            _ => f64::NAN, // never observed
        });
        let out = build_thresholds(&raw, &ids(3), 0.5, false, &[false, true, false]).unwrap();
        assert!(out.thresholds[0].is_some());
        assert_eq!(out.thresholds[1], None); // masked on request
        assert_eq!(out.thresholds[2], None); // auto-masked
        assert_eq!(out.masked, vec![false, true, true]);
        for t in 0..4 {
            assert!(out.dataset.is_missing(t, 1));
            assert!(out.dataset.is_missing(t, 2));
            assert!(!out.dataset.is_missing(t, 0));
        }
    }

    #[test]
    fn site_without_positive_values_is_a_named_error() {
        let raw = DMatrix::from_fn(5, 2, |t, j| if j == 0 { (t + 1) as f64 } else { 0.0 });
        let err = build_thresholds(&raw, &ids(2), 0.75, true, &[false, false])
            .unwrap_err()
            .to_string();
        assert!(err.contains("S1") && err.contains("positive"), "{err}");
    }

    #[test]
    fn thresholds_are_monotone_in_the_quantile() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let raw = DMatrix::from_fn(60, 4, |_, _| {
            if rng.gen::<f64>() < 0.3 { 0.0 } else { rng.gen::<f64>() * 50.0 }
        });
        let mask = vec![false; 4];
        let mut prev: Option<Vec<f64>> = None;
        for q in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95] {
            let out = build_thresholds(&raw, &ids(4), q, true, &mask).unwrap();
            let thr: Vec<f64> = out.thresholds.iter().map(|t| t.unwrap()).collect();
            if let Some(p) = &prev {
                for j in 0..4 {
                    assert!(
                        thr[j] >= p[j],
                        "site {j}: threshold fell from {} to {} as q rose to {q}",
                        p[j],
                        thr[j]
                    );
                }
            }
            prev = Some(thr);
        }
    }

    #[test]
    fn missing_cells_never_expose_observations() {
        let mut raw = DMatrix::from_fn(6, 2, |t, j| (t + j + 1) as f64);
        raw[(2, 0)] = f64::NAN;
        let out = build_thresholds(&raw, &ids(2), 0.5, false, &[false, true]).unwrap();
        // The missing cell and the whole masked site carry NaN observations.
        assert!(out.dataset.y()[(2, 0)].is_nan());
        for t in 0..6 {
            assert!(out.dataset.y()[(t, 1)].is_nan());
            assert!(out.dataset.u()[(t, 1)].is_infinite());
        }
    }
}
