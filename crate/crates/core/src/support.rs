//! Support extraction from learned variances by scalar 2-means.

use crate::error::{domain, Result};

/// Indices (0-based, ascending) assigned to the larger centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub indices: Vec<usize>,
    /// `(large, small)` final centroids.
    pub centroids: (f64, f64),
    /// Set when all variances coincide and no split exists.
    pub degenerate: bool,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

fn assign(lambda: &[f64], hi: f64, lo: f64) -> Vec<bool> {
    lambda.iter().map(|&l| (l - hi).abs() <= (l - lo).abs()).collect()
}

fn mean_of(lambda: &[f64], mask: &[bool], member: bool) -> Option<f64> {
    let (sum, n) = lambda
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == member)
        .fold((0.0, 0usize), |(s, n), (l, _)| (s + l, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn sse(lambda: &[f64], mask: &[bool]) -> f64 {
    [true, false]
        .iter()
        .filter_map(|&member| {
            let mu = mean_of(lambda, mask, member)?;
            Some(
                lambda
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m == member)
                    .map(|(l, _)| (l - mu).powi(2))
                    .sum::<f64>(),
            )
        })
        .sum()
}

/// Best split of the sorted values into a lower and an upper run. In one
/// dimension an SSE-optimal 2-partition is always of this form.
fn best_threshold_cut(lambda: &[f64]) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..lambda.len()).collect();
    order.sort_by(|&a, &b| lambda[a].total_cmp(&lambda[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| lambda[i]).collect();
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut best: Option<(f64, usize)> = None;
    let mut low = 0.0;
    for k in 1..n {
        low += sorted[k - 1];
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        // SSE up to a constant: -(S_lo^2 / k + S_hi^2 / (n - k)).
        let score = -(low * low / k as f64 + (total - low).powi(2) / (n - k) as f64);
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, k));
        }
    }
    let (_, k) = best?;
    let mut mask = vec![false; n];
    for &i in &order[k..] {
        mask[i] = true;
    }
    Some(mask)
}

/// Lloyd iterations on the scalars `lambda` with centroids started at the
/// maximum and the minimum. Ties go to the larger centroid.
///
/// Lloyd's method can stall in a local optimum when the values do not form
/// two clear groups, so the result is compared with the best threshold cut of
/// the sorted values and replaced when that cut has a smaller within-cluster
/// error.
pub fn kmeans_support(lambda: &[f64]) -> Result<SupportSet> {
    if lambda.len() < 2 {
        return Err(domain("need at least two variances to split"));
    }
    if let Some(bad) = lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(domain(format!("variances must be finite and non-negative, got {bad}")));
    }
    let hi0 = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo0 = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    if hi0 == lo0 {
        return Ok(SupportSet {
            indices: (0..lambda.len()).collect(),
            centroids: (hi0, lo0),
            degenerate: true,
        });
    }
    let (mut hi, mut lo) = (hi0, lo0);
    let mut mask = assign(lambda, hi, lo);
    // Lloyd's algorithm strictly decreases the within-cluster error, so it
    // cannot revisit a partition; the bound only guards against float cycles.
    for _ in 0..lambda.len() + 2 {
        hi = mean_of(lambda, &mask, true).unwrap_or(hi);
        lo = mean_of(lambda, &mask, false).unwrap_or(lo);
        let next = assign(lambda, hi, lo);
        if next == mask {
            break;
        }
        mask = next;
    }
    if let Some(cut) = best_threshold_cut(lambda) {
        let (lloyd, global) = (sse(lambda, &mask), sse(lambda, &cut));
        if global < lloyd * (1.0 - 1e-12) {
            mask = cut;
            hi = mean_of(lambda, &mask, true).unwrap_or(hi);
            lo = mean_of(lambda, &mask, false).unwrap_or(lo);
        }
    }
    Ok(SupportSet {
        indices: mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
        centroids: (hi, lo),
        degenerate: false,
    })
}
