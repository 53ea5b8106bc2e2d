use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::column_f64;
use crate::error::{Error, Result};
use crate::probes::ProbeReport;

/// Minimum number of widths for a rank correlation.
pub const MIN_CORRELATION_POINTS: usize = 4;

/// Smallest width whose training error is exactly zero, given
/// `(width, train_err)` pairs in any order.
pub fn interpolation_threshold(points: &[(usize, f64)]) -> Option<usize> {
    points.iter().filter(|(_, e)| *e == 0.0).map(|(w, _)| *w).min()
}

/// Final-epoch training rows of one seed, in width order.
pub fn final_train_rows(rows: &[ProbeReport], seed: u64, final_epoch: usize) -> Vec<&ProbeReport> {
    let mut out: Vec<&ProbeReport> =
        rows.iter().filter(|r| r.seed == seed && r.epoch == final_epoch && r.split == "train").collect();
    out.sort_by_key(|r| r.width);
    out
}

fn seeds_of(rows: &[ProbeReport]) -> Vec<u64> {
    let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Interpolation threshold per seed from the final-epoch training rows;
/// `None` when no width reaches zero training error.
pub fn find_interpolation_threshold(rows: &[ProbeReport], final_epoch: usize) -> BTreeMap<u64, Option<usize>> {
    seeds_of(rows)
        .into_iter()
        .map(|seed| {
            let pts: Vec<(usize, f64)> = final_train_rows(rows, seed, final_epoch)
                .into_iter()
                .filter_map(|r| r.train_err.map(|e| (r.width, e)))
                .collect();
            (seed, interpolation_threshold(&pts))
        })
        .collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < MIN_CORRELATION_POINTS {
        return Err(Error::InsufficientData(format!(
            "{} points, need at least {MIN_CORRELATION_POINTS}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InsufficientData("a metric is constant across widths".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric_a: String,
    pub metric_b: String,
    pub per_seed: BTreeMap<u64, f64>,
    pub mean: f64,
}

/// Spearman correlation of two `results.csv` columns across widths, on the
/// final-epoch training rows of each seed, averaged over seeds. Widths where
/// either metric is missing are left out.
pub fn correlate(rows: &[ProbeReport], final_epoch: usize, metric_a: &str, metric_b: &str) -> Result<Correlation> {
    let mut per_seed = BTreeMap::new();
    for seed in seeds_of(rows) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in final_train_rows(rows, seed, final_epoch) {
            if let (Some(x), Some(y)) = (column_f64(r, metric_a)?, column_f64(r, metric_b)?) {
                a.push(x);
                b.push(y);
            }
        }
        per_seed.insert(seed, spearman(&a, &b)?);
    }
    if per_seed.is_empty() {
        return Err(Error::InsufficientData("no final-epoch rows".into()));
    }
    let mean = per_seed.values().sum::<f64>() / per_seed.len() as f64;
    Ok(Correlation { metric_a: metric_a.into(), metric_b: metric_b.into(), per_seed, mean })
}

/// True when the maximum of `values` lies strictly inside the sequence and
/// exceeds both endpoints.
pub fn has_interior_maximum(values: &[f64]) -> bool {
    let Some((imax, vmax)) = values.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)) else {
        return false;
    };
    imax > 0 && imax + 1 < values.len() && vmax > values[0] && vmax > values[values.len() - 1]
}
