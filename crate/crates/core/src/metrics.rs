//! Normalized mean-squared error and decibel conversion.

use num_complex::Complex64;

use crate::error::{domain, Result};

/// Decibel values are clamped below at this level so that exact estimates
/// still produce finite output.
pub const DB_FLOOR: f64 = -120.0;

pub fn to_db(x: f64) -> f64 {
    if x <= 0.0 {
        return DB_FLOOR;
    }
    (10.0 * x.log10()).max(DB_FLOOR)
}

/// `(1/M) sum_m ||x_hat_m - x_m||^2 / ||x_m||^2`. Blocks whose truth has zero
/// norm are skipped with a warning; an error is returned if none remain.
pub fn mse_metric(estimates: &[Vec<Complex64>], truths: &[Vec<Complex64>]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(domain("estimate and truth sequences differ in length"));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for (m, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.len() != t.len() {
            return Err(domain(format!("block {m}: estimate and truth differ in length")));
        }
        let den: f64 = t.iter().map(|v| v.norm_sqr()).sum();
        if den == 0.0 {
            log::warn!("block {m} has an all-zero truth and is excluded from the MSE");
            continue;
        }
        let num: f64 = e.iter().zip(t).map(|(a, b)| (a - b).norm_sqr()).sum();
        acc += num / den;
        used += 1;
    }
    if used == 0 {
        return Err(domain("no block with a non-zero truth"));
    }
    Ok(acc / used as f64)
}

/// [`mse_metric`] for a real scalar sequence.
pub fn mse_scalar(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    let wrap = |v: &[f64]| -> Vec<Vec<Complex64>> {
        v.iter().map(|&x| vec![Complex64::new(x, 0.0)]).collect()
    };
    mse_metric(&wrap(estimates), &wrap(truths))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
