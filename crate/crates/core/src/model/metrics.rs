use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn eval(self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
        }
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score #{i}")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score, then split into runs of equal scores.
fn tie_groups(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..=idx.len() {
        if k == idx.len() || scores[idx[k]] != scores[idx[start]] {
            groups.push((start, k));
            start = k;
        }
    }
    (idx, groups)
}

/// Mann–Whitney U over `n₊·n₋`, tied pairs counting ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let (idx, groups) = tie_groups(scores);
    let mut neg_below = 0.0;
    let mut u = 0.0;
    for (a, b) in groups {
        let p = idx[a..b].iter().filter(|&&i| labels[i]).count() as f64;
        let q = (b - a) as f64 - p;
        u += p * (neg_below + 0.5 * q);
        neg_below += q;
    }
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (Rₖ − Rₖ₋₁)·Pₖ` over descending distinct
/// thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let (idx, groups) = tie_groups(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &(a, b) in groups.iter().rev() {
        for &i in &idx[a..b] {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub const BOOTSTRAP_RETRIES: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    /// One `(low, high)` per requested metric.
    pub intervals: Vec<(f64, f64)>,
    /// Single-class resamples that were redrawn.
    pub redraws: u64,
}

/// Percentile bootstrap over `(score, label)` pairs. Resample `i` draws from
/// its own substream so results do not depend on thread scheduling.
pub fn bootstrap(scores: &[f64], labels: &[bool], metrics: &[Metric], n_boot: usize, level: f64, seed: u64) -> Result<Bootstrap> {
    bootstrap_with_retries(scores, labels, metrics, n_boot, level, seed, BOOTSTRAP_RETRIES)
}

fn bootstrap_with_retries(
    scores: &[f64],
    labels: &[bool],
    metrics: &[Metric],
    n_boot: usize,
    level: f64,
    seed: u64,
    retries: u32,
) -> Result<Bootstrap> {
    for m in metrics {
        m.eval(scores, labels)?;
    }
    if !(0.0..1.0).contains(&(level / 100.0)) || n_boot == 0 {
        return Err(Error::Invalid(format!("bad bootstrap settings: {n_boot} resamples at {level}%")));
    }
    let n = scores.len();
    let draws: Vec<Result<(Vec<f64>, u64)>> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::substream(seed, &format!("bootstrap/{i}"));
            let mut s = vec![0.0; n];
            let mut y = vec![false; n];
            for attempt in 0..=retries {
                for k in 0..n {
                    let j = seed::below(&mut rng, n);
                    s[k] = scores[j];
                    y[k] = labels[j];
                }
                let pos = y.iter().filter(|&&v| v).count();
                if pos > 0 && pos < n {
                    let vals = metrics.iter().map(|m| m.eval(&s, &y)).collect::<Result<_>>()?;
                    return Ok((vals, u64::from(attempt)));
                }
            }
            Err(Error::Invalid(format!("bootstrap resample {i} stayed single-class after {retries} redraws")))
        })
        .collect();
    let mut per_metric = vec![Vec::with_capacity(n_boot); metrics.len()];
    let mut redraws = 0;
    for d in draws {
        let (vals, r) = d?;
        redraws += r;
        for (k, v) in vals.into_iter().enumerate() {
            per_metric[k].push(v);
        }
    }
    let tail = (100.0 - level) / 200.0;
    let intervals = per_metric
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            (percentile(&v, tail), percentile(&v, 1.0 - tail))
        })
        .collect();
    Ok(Bootstrap { intervals, redraws })
}

pub fn bootstrap_ci(scores: &[f64], labels: &[bool], metric: Metric, n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    Ok(bootstrap(scores, labels, &[metric], n_boot, level, seed)?.intervals[0])
}

/// Linear interpolation between closest ranks of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
        let mut u = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        u += 1.0;
                    } else if s[i] == s[j] {
                        u += 0.5;
                    }
                }
            }
        }
        u / pairs
    }

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[1.0, 2.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[3.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::SingleClass)));
        assert!(auroc(&[f64::NAN, 1.0], &[true, false]).is_err());
        // precision 1 at recall .5, then 2/3 at recall 1
        let ap = auprc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_bootstrap_is_zero_width() {
        let y: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let ci = bootstrap_ci(&[0.5; 50], &y, Metric::Auroc, 1000, 95.0, 9).unwrap();
        assert_eq!(ci, (0.5, 0.5));
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let mut r = seed::substream(1, "t");
        let s: Vec<f64> = (0..1000).map(|_| seed::unit_f64(&mut r)).collect();
        let y: Vec<bool> = s.iter().map(|&v| v + seed::unit_f64(&mut r) > 1.0).collect();
        let a = bootstrap(&s, &y, &[Metric::Auroc, Metric::Auprc], 200, 95.0, 4).unwrap();
        let b = bootstrap(&s, &y, &[Metric::Auroc, Metric::Auprc], 200, 95.0, 4).unwrap();
        assert_eq!(a, b);
        for (lo, hi) in a.intervals {
            assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        }
    }

    #[test]
    fn unbootstrappable_sample_errors() {
        let r = bootstrap_with_retries(&[0.0, 1.0], &[false, true], &[Metric::Auroc], 50, 95.0, 1, 0);
        assert!(r.is_err());
        assert!(bootstrap_with_retries(&[0.0, 1.0], &[false, true], &[Metric::Auroc], 50, 95.0, 1, 100).is_ok());
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert_eq!(percentile(&v, 1.0), 4.0);
    }

    proptest! {
        #[test]
        fn matches_pair_counting(data in prop::collection::vec((0u8..20, any::<bool>()), 2..80)) {
            let s: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 4.0).collect();
            let y: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            prop_assert!((auroc(&s, &y).unwrap() - brute_auroc(&s, &y)).abs() <= 1e-12);
        }

        #[test]
        fn monotone_invariance_and_complement(data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..80)) {
            let s: Vec<f64> = data.iter().map(|d| d.0).collect();
            let y: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            let a = auroc(&s, &y).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let aff: Vec<f64> = s.iter().map(|v| 3.0 * v - 1.0).collect();
            prop_assert!((auroc(&e, &y).unwrap() - a).abs() <= 1e-12);
            prop_assert!((auroc(&aff, &y).unwrap() - a).abs() <= 1e-12);
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                prop_assert!((a + auroc(&neg, &y).unwrap() - 1.0).abs() <= 1e-12);
            }
            let ap = auprc(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
