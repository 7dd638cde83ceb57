//! Intervention intervals and their hourly binary grid.

use serde::{Deserialize, Serialize};

use crate::ingest::RawInterval;

/// Interventions whose start marks acute respiratory failure onset.
pub const ARF_INTERVENTIONS: &[&str] = &["ventilation"];
/// Numeric variable whose positive records also mark respiratory failure.
pub const PEEP_VARIABLE: &str = "peep";
pub const VASOPRESSORS: &[&str] = &["norepinephrine", "epinephrine", "dopamine", "vasopressin", "phenylephrine"];

/// A clipped interval in hours since ICU admission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionInterval {
    /// Intervention index in registry output order.
    pub var: usize,
    pub start_h: f64,
    pub end_h: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalCounters {
    pub missing_start: u64,
    pub end_clamped: u64,
    pub clipped: u64,
    pub outside_stay: u64,
    pub reversed: u64,
}

impl IntervalCounters {
    pub fn add(&mut self, o: &IntervalCounters) {
        self.missing_start += o.missing_start;
        self.end_clamped += o.end_clamped;
        self.clipped += o.clipped;
        self.outside_stay += o.outside_stay;
        self.reversed += o.reversed;
    }
}

/// Clip raw intervals to `[0, los_hours]`. A missing end runs to discharge;
/// a missing start drops the row; rows entirely outside the stay are dropped.
pub fn resolve_intervals(raw: &[RawInterval], los_hours: f64) -> (Vec<InterventionInterval>, IntervalCounters) {
    let mut c = IntervalCounters::default();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let Some(start) = r.start_h else {
            c.missing_start += 1;
            continue;
        };
        let end = match r.end_h {
            Some(e) => e,
            None => {
                c.end_clamped += 1;
                los_hours
            }
        };
        if end < start {
            c.reversed += 1;
            continue;
        }
        if start >= los_hours || end < 0.0 {
            c.outside_stay += 1;
            continue;
        }
        let (s, e) = (start.max(0.0), end.min(los_hours));
        if s != start || e != end {
            c.clipped += 1;
        }
        out.push(InterventionInterval {
            var: r.var,
            start_h: s,
            end_h: e,
        });
    }
    (out, c)
}

/// Per-stay hour × intervention binary matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionGrid {
    pub stay_id: i64,
    pub n_bins: usize,
    pub n_vars: usize,
    pub cells: Vec<u8>,
}

impl InterventionGrid {
    pub fn get(&self, bin: usize, var: usize) -> u8 {
        self.cells[bin * self.n_vars + var]
    }

    pub fn row(&self, bin: usize) -> &[u8] {
        &self.cells[bin * self.n_vars..(bin + 1) * self.n_vars]
    }

    /// The first `n` bins.
    pub fn truncated(&self, n: usize) -> InterventionGrid {
        let n = n.min(self.n_bins);
        InterventionGrid {
            stay_id: self.stay_id,
            n_bins: n,
            n_vars: self.n_vars,
            cells: self.cells[..n * self.n_vars].to_vec(),
        }
    }
}

/// Mark bin `t` for variable `v` when the closed interval `[start, end]`
/// intersects the half-open bin `[t·w, (t+1)·w)`. Zero-length intervals mark
/// their containing bin; an interval ending exactly on a bin edge marks the
/// bin that starts there.
pub fn binarize_intervals(
    stay_id: i64,
    intervals: &[InterventionInterval],
    n_bins: usize,
    n_vars: usize,
    window_hours: u32,
) -> InterventionGrid {
    let w = f64::from(window_hours);
    let mut cells = vec![0u8; n_bins * n_vars];
    for iv in intervals {
        if iv.var >= n_vars || n_bins == 0 {
            continue;
        }
        let first = (iv.start_h / w).floor().max(0.0) as usize;
        let last = ((iv.end_h / w).floor().max(0.0) as usize).min(n_bins - 1);
        for t in first..=last {
            cells[t * n_vars + iv.var] = 1;
        }
    }
    InterventionGrid {
        stay_id,
        n_bins,
        n_vars,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(s: Option<f64>, e: Option<f64>) -> RawInterval {
        RawInterval { var: 0, start_h: s, end_h: e }
    }

    /// Independent check: sample membership per bin.
    fn oracle(intervals: &[(f64, f64)], n_bins: usize, w: f64) -> Vec<u8> {
        (0..n_bins)
            .map(|t| {
                let (lo, hi) = (t as f64 * w, (t + 1) as f64 * w);
                intervals.iter().any(|&(s, e)| s < hi && e >= lo) as u8
            })
            .collect()
    }

    #[test]
    fn resolution_rules() {
        let (r, _) = resolve_intervals(&[raw(Some(2.5), Some(4.2))], 72.0);
        assert_eq!((r[0].start_h, r[0].end_h), (2.5, 4.2));
        let (r, c) = resolve_intervals(&[raw(Some(70.0), None)], 72.0);
        assert_eq!((r[0].start_h, r[0].end_h), (70.0, 72.0));
        assert_eq!(c.end_clamped, 1);
        let (r, _) = resolve_intervals(&[raw(Some(-1.0), Some(1.0))], 72.0);
        assert_eq!((r[0].start_h, r[0].end_h), (0.0, 1.0));
        let (r, c) = resolve_intervals(&[raw(None, Some(3.0)), raw(Some(80.0), Some(90.0)), raw(Some(-5.0), Some(-1.0))], 72.0);
        assert!(r.is_empty());
        assert_eq!((c.missing_start, c.outside_stay), (1, 2));
    }

    #[test]
    fn binarization_examples() {
        let iv = |s, e| InterventionInterval { var: 0, start_h: s, end_h: e };
        let g = binarize_intervals(1, &[iv(2.5, 4.2)], 8, 1, 1);
        assert_eq!(g.cells, vec![0, 0, 1, 1, 1, 0, 0, 0]);
        let g = binarize_intervals(1, &[], 4, 2, 1);
        assert!(g.cells.iter().all(|&c| c == 0));
        let a = binarize_intervals(1, &[iv(1.0, 3.0), iv(2.0, 5.0)], 8, 1, 1);
        let b = binarize_intervals(1, &[iv(1.0, 5.0)], 8, 1, 1);
        assert_eq!(a, b);
        let point = binarize_intervals(1, &[iv(3.4, 3.4)], 8, 1, 1);
        assert_eq!(point.cells, vec![0, 0, 0, 1, 0, 0, 0, 0]);
        let to_discharge = binarize_intervals(1, &[iv(70.0, 72.0)], 72, 1, 1);
        assert_eq!(to_discharge.cells[70..], [1, 1]);
    }

    proptest! {
        #[test]
        fn matches_sampling_oracle(
            raw_ivs in prop::collection::vec((0u32..600, 0u32..600), 0..6),
            w in 1u32..6,
        ) {
            let los = 48.0;
            let ivs: Vec<_> = raw_ivs.iter().map(|&(a, b)| {
                let (s, e) = (a.min(b) as f64 / 10.0, a.max(b) as f64 / 10.0);
                InterventionInterval { var: 0, start_h: s, end_h: e.min(los) }
            }).filter(|iv| iv.start_h < los).collect();
            let n = (los / w as f64).ceil() as usize;
            let g = binarize_intervals(0, &ivs, n, 1, w);
            let pairs: Vec<_> = ivs.iter().map(|iv| (iv.start_h, iv.end_h)).collect();
            let mut expected = oracle(&pairs, n, w as f64);
            // An interval ending exactly at discharge cannot mark a bin past the grid.
            expected.truncate(n);
            prop_assert_eq!(g.cells, expected);
        }

        #[test]
        fn extending_never_clears(s in 0u32..400, len in 0u32..100, ext in 0u32..100) {
            let s = s as f64 / 10.0;
            let e = (s + len as f64 / 10.0).min(48.0);
            let e2 = (e + ext as f64 / 10.0).min(48.0);
            let a = binarize_intervals(0, &[InterventionInterval { var: 0, start_h: s, end_h: e }], 48, 1, 1);
            let b = binarize_intervals(0, &[InterventionInterval { var: 0, start_h: s, end_h: e2 }], 48, 1, 1);
            for (x, y) in a.cells.iter().zip(&b.cells) {
                prop_assert!(x <= y);
            }
        }
    }
}
