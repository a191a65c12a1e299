//! Intrinsic ranking evaluation of a metric against the oracle return:
//! rebalancing, Spearman correlation and good/poor ROC-AUC.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::metrics::Direction;
use crate::rng;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.75;

/// Subsample `policies` so every nonempty equal-width return bin keeps the
/// same number of policies (the smallest nonempty bin count). Returns the
/// kept ids in input order.
pub fn rebalance<T: Clone>(policies: &[(T, f64)], n_bins: usize, seed: u64) -> Result<Vec<T>> {
    if n_bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {n_bins}")));
    }
    if policies.is_empty() {
        return Err(Error::Invalid("no policies to rebalance".into()));
    }
    if let Some((_, r)) = policies.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::Invalid(format!("non-finite return {r}")));
    }
    let lo = policies.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = policies.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        log::warn!("all {} policies share one return; rebalancing is a passthrough", policies.len());
        return Ok(policies.iter().map(|p| p.0.clone()).collect());
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, (_, r)) in policies.iter().enumerate() {
        let b = (((r - lo) / width) as usize).min(n_bins - 1);
        bins[b].push(i);
    }
    let per_bin = bins.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap();
    let mut keep = Vec::new();
    for (b, members) in bins.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut r = rng::substream(seed, "rebalance", &[b as u64]);
        keep.extend(index::sample(&mut r, members.len(), per_bin).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| policies[i].0.clone()).collect())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn oriented(values: &[f64], direction: Direction) -> Vec<f64> {
    match direction {
        Direction::HigherBetter => values.to_vec(),
        Direction::LowerBetter => values.iter().map(|v| -v).collect(),
    }
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Lower-is-better metrics are negated first, so +1 always means the metric
/// orders policies exactly like the oracle.
pub fn spearman(metric: &[f64], oracle: &[f64], direction: Direction) -> Result<f64> {
    if metric.len() != oracle.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: {} metric values, {} oracle values",
            metric.len(),
            oracle.len()
        )));
    }
    if metric.len() < 2 {
        return Err(Error::Invalid("spearman needs at least 2 values".into()));
    }
    let a = average_ranks(&oriented(metric, direction));
    let b = average_ranks(oracle);
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Invalid("spearman undefined for constant values".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Probability that the metric favors a random good policy over a random
/// poor one, ties counted half (Mann-Whitney statistic).
pub fn roc_auc(metric: &[f64], good: &[bool], direction: Direction) -> Result<f64> {
    if metric.len() != good.len() {
        return Err(Error::Invalid("length mismatch between metric values and labels".into()));
    }
    let n_good = good.iter().filter(|&&g| g).count();
    let n_poor = good.len() - n_good;
    if n_good == 0 || n_poor == 0 {
        return Err(Error::Invalid(format!(
            "degenerate classes: {n_good} good, {n_poor} poor"
        )));
    }
    let ranks = average_ranks(&oriented(metric, direction));
    let rank_sum: f64 = ranks.iter().zip(good).filter(|(_, &g)| g).map(|(r, _)| r).sum();
    let (g, p) = (n_good as f64, n_poor as f64);
    Ok((rank_sum - g * (g + 1.0) / 2.0) / (g * p))
}

/// Good iff normalized return >= threshold.
pub fn good_poor_labels(normalized_returns: &[f64], threshold: f64) -> Vec<bool> {
    normalized_returns.iter().map(|&r| r >= threshold).collect()
}
