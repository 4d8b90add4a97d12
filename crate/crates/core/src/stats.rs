//! Rank statistics: midrank percentiles, ROC AUC, medians and quartiles.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("reference distribution is empty")]
    EmptyReference,
    #[error("non-finite value {0} in input")]
    NonFinite(f64),
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

fn total_cmp(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Midrank percentile of `p` against `reference`, in [0, 100]:
/// `100 * (#{r < p} + 0.5 * #{r == p}) / n`.
pub fn to_percentile(p: f64, reference: &[f64]) -> Result<f64, StatsError> {
    if reference.is_empty() {
        return Err(StatsError::EmptyReference);
    }
    if !p.is_finite() {
        return Err(StatsError::NonFinite(p));
    }
    let mut less = 0usize;
    let mut equal = 0usize;
    for &r in reference {
        if !r.is_finite() {
            return Err(StatsError::NonFinite(r));
        }
        if r < p {
            less += 1;
        } else if r == p {
            equal += 1;
        }
    }
    Ok(100.0 * (less as f64 + 0.5 * equal as f64) / reference.len() as f64)
}

/// Sorted reference for repeated percentile lookups in `O(log n)`.
#[derive(Debug, Clone)]
pub struct PercentileReference {
    sorted: Vec<f64>,
}

impl PercentileReference {
    pub fn new(reference: &[f64]) -> Result<Self, StatsError> {
        if reference.is_empty() {
            return Err(StatsError::EmptyReference);
        }
        if let Some(&bad) = reference.iter().find(|r| !r.is_finite()) {
            return Err(StatsError::NonFinite(bad));
        }
        let mut sorted = reference.to_vec();
        sorted.sort_by(total_cmp);
        Ok(PercentileReference { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn percentile(&self, p: f64) -> f64 {
        let less = self.sorted.partition_point(|&r| r < p);
        let less_eq = self.sorted.partition_point(|&r| r <= p);
        let equal = less_eq - less;
        100.0 * (less as f64 + 0.5 * equal as f64) / self.sorted.len() as f64
    }
}

/// Median of a sample; `None` when empty.
pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile (the common "type 7" definition).
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Interquartile range `Q3 - Q1`.
pub fn iqr(xs: &[f64]) -> Option<f64> {
    Some(quantile(xs, 0.75)? - quantile(xs, 0.25)?)
}

/// ROC AUC via the Mann-Whitney rank statistic with midranks for ties.
/// `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| total_cmp(&scores[a], &scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group spans i+1 ..= j
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg_rank * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let p = n_pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * n_neg as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentile_examples() {
        assert_eq!(to_percentile(0.3, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 62.5);
        assert_eq!(to_percentile(0.7, &[0.7]).unwrap(), 50.0);
        assert_eq!(to_percentile(0.9, &[0.1, 0.2, 0.3]).unwrap(), 100.0);
        assert_eq!(to_percentile(0.0, &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(to_percentile(0.5, &[]), Err(StatsError::EmptyReference));
    }

    #[test]
    fn auc_examples() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, Some(0.75));
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), Some(0.5));
    }

    #[test]
    fn quartiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(median(&xs), Some(3.0));
        assert_eq!(quantile(&xs, 0.25), Some(2.0));
        assert_eq!(iqr(&xs), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn sorted_reference_matches_linear_count(
            reference in proptest::collection::vec(0u8..20, 1..200),
            p in 0u8..22,
        ) {
            let r: Vec<f64> = reference.iter().map(|&x| x as f64 / 20.0).collect();
            let p = p as f64 / 20.0;
            let fast = PercentileReference::new(&r).unwrap().percentile(p);
            prop_assert_eq!(fast, to_percentile(p, &r).unwrap());
        }

        #[test]
        fn percentile_is_monotone(
            reference in proptest::collection::vec(0.0f64..1.0, 1..100),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = PercentileReference::new(&reference).unwrap();
            prop_assert!(r.percentile(lo) <= r.percentile(hi));
            prop_assert!((0.0..=100.0).contains(&r.percentile(lo)));
        }

        #[test]
        fn auc_invariant_under_increasing_transform(
            data in proptest::collection::vec((0u8..10, any::<bool>()), 2..60),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 10.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&moved, &labels).unwrap());
        }
    }
}
