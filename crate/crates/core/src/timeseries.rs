//! The Vital grid: hourly aggregation with recorded-value indicators, outlier
//! removal, missingness filtering, imputation, normalization and
//! cross-source column harmonization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{CanonicalVariable, ConceptMaps};
use crate::error::{Error, Result};
use crate::ingest::{Source, VitalEvent};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HourlyCell {
    pub value: Option<f64>,
    pub indicator: bool,
}

impl HourlyCell {
    pub const EMPTY: HourlyCell = HourlyCell {
        value: None,
        indicator: false,
    };
}

/// Per-stay bins × variables matrix, row-major. Bin `t` covers
/// `[t·w, (t+1)·w)` hours since ICU admission.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalGrid {
    pub stay_id: i64,
    pub n_bins: usize,
    pub columns: Vec<String>,
    pub cells: Vec<HourlyCell>,
}

impl VitalGrid {
    pub fn empty(stay_id: i64, n_bins: usize, columns: Vec<String>) -> Self {
        let cells = vec![HourlyCell::EMPTY; n_bins * columns.len()];
        VitalGrid {
            stay_id,
            n_bins,
            columns,
            cells,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn cell(&self, bin: usize, var: usize) -> &HourlyCell {
        &self.cells[bin * self.columns.len() + var]
    }

    pub fn cell_mut(&mut self, bin: usize, var: usize) -> &mut HourlyCell {
        let v = self.columns.len();
        &mut self.cells[bin * v + var]
    }

    pub fn row(&self, bin: usize) -> &[HourlyCell] {
        let v = self.columns.len();
        &self.cells[bin * v..(bin + 1) * v]
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == id)
    }

    /// The first `n` bins.
    pub fn truncated(&self, n: usize) -> VitalGrid {
        let n = n.min(self.n_bins);
        VitalGrid {
            stay_id: self.stay_id,
            n_bins: n,
            columns: self.columns.clone(),
            cells: self.cells[..n * self.columns.len()].to_vec(),
        }
    }

    /// Drop the named columns.
    pub fn drop_columns(&mut self, drop: &BTreeSet<String>) {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&j| !drop.contains(&self.columns[j]))
            .collect();
        if keep.len() == self.columns.len() {
            return;
        }
        let mut cells = Vec::with_capacity(self.n_bins * keep.len());
        for t in 0..self.n_bins {
            let row = self.row(t);
            cells.extend(keep.iter().map(|&j| row[j]));
        }
        self.columns = keep.iter().map(|&j| self.columns[j].clone()).collect();
        self.cells = cells;
    }
}

/// Number of bins covering a stay: `ceil(los / w)`, at least one.
pub fn bin_count(los_hours: f64, window_hours: u32) -> usize {
    ((los_hours / f64::from(window_hours)).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateStat {
    #[default]
    Mean,
    Median,
    Last,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateCounters {
    pub placed: u64,
    pub before_admission: u64,
    pub after_discharge: u64,
    /// Events for variables outside the grid's column set.
    pub off_grid: u64,
}

impl AggregateCounters {
    pub fn add(&mut self, o: &AggregateCounters) {
        self.placed += o.placed;
        self.before_admission += o.before_admission;
        self.after_discharge += o.after_discharge;
        self.off_grid += o.off_grid;
    }
}

/// Aggregate one stay's mapped events into a grid over `columns`, each
/// column given as its registry vital position. Cells hold the per-bin
/// statistic of all events in `[t·w, (t+1)·w) ∩ [0, los)`; indicator is 1
/// iff at least one event landed in the bin.
pub fn aggregate_hourly(
    stay_id: i64,
    events: &[VitalEvent],
    columns: &[&CanonicalVariable],
    los_hours: f64,
    window_hours: u32,
    stat: AggregateStat,
) -> (VitalGrid, AggregateCounters) {
    let n_bins = bin_count(los_hours, window_hours);
    let n_vars = columns.len();
    let w = f64::from(window_hours);
    let max_pos = columns.iter().map(|c| c.output_position + 1).max().unwrap_or(0);
    let mut col_of = vec![usize::MAX; max_pos];
    for (j, c) in columns.iter().enumerate() {
        col_of[c.output_position] = j;
    }

    let mut counters = AggregateCounters::default();
    let mut sums = vec![0.0f64; n_bins * n_vars];
    let mut counts = vec![0u32; n_bins * n_vars];
    let mut lists: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut last: Vec<(f64, f64)> = if stat == AggregateStat::Last {
        vec![(f64::NEG_INFINITY, 0.0); n_bins * n_vars]
    } else {
        Vec::new()
    };
    for e in events {
        let Some(&j) = col_of.get(e.var).filter(|&&j| j != usize::MAX) else {
            counters.off_grid += 1;
            continue;
        };
        if e.hour < 0.0 {
            counters.before_admission += 1;
            continue;
        }
        if e.hour >= los_hours {
            counters.after_discharge += 1;
            continue;
        }
        let t = ((e.hour / w).floor() as usize).min(n_bins - 1);
        let k = t * n_vars + j;
        counters.placed += 1;
        counts[k] += 1;
        match stat {
            AggregateStat::Mean => sums[k] += e.value,
            AggregateStat::Median => lists.entry(k).or_default().push(e.value),
            AggregateStat::Last => {
                if e.hour >= last[k].0 {
                    last[k] = (e.hour, e.value);
                }
            }
        }
    }

    let ids: Vec<String> = columns.iter().map(|c| c.id.clone()).collect();
    let mut grid = VitalGrid::empty(stay_id, n_bins, ids);
    for k in 0..n_bins * n_vars {
        if counts[k] == 0 {
            continue;
        }
        let value = match stat {
            AggregateStat::Mean => sums[k] / f64::from(counts[k]),
            AggregateStat::Median => median(lists.get_mut(&k).expect("bin has events")),
            AggregateStat::Last => last[k].1,
        };
        grid.cells[k] = HourlyCell {
            value: Some(value),
            indicator: true,
        };
    }
    (grid, counters)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Empty every cell outside its variable's `[outlier_low, outlier_high]`
/// range (bounds inclusive) and clear its indicator. Returns the number of
/// cells emptied.
pub fn remove_outliers(grid: &mut VitalGrid, maps: &ConceptMaps) -> u64 {
    let ranges: Vec<(f64, f64)> = grid
        .columns
        .iter()
        .map(|id| {
            maps.variable(id).map_or((f64::NEG_INFINITY, f64::INFINITY), |v| {
                (
                    v.outlier_low.unwrap_or(f64::NEG_INFINITY),
                    v.outlier_high.unwrap_or(f64::INFINITY),
                )
            })
        })
        .collect();
    let n_vars = grid.columns.len();
    let mut removed = 0;
    for (k, cell) in grid.cells.iter_mut().enumerate() {
        if let Some(v) = cell.value {
            let (lo, hi) = ranges[k % n_vars];
            if v < lo || v > hi {
                *cell = HourlyCell::EMPTY;
                removed += 1;
            }
        }
    }
    removed
}

/// Columns that a source cannot populate because no raw key maps to them.
pub fn structurally_absent(maps: &ConceptMaps, source: Source) -> BTreeSet<String> {
    maps.vitals()
        .into_iter()
        .filter(|v| v.absent_in(source))
        .map(|v| v.id.clone())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MissingnessReport {
    pub per_stay_null_ratio: BTreeMap<i64, f64>,
    pub per_variable_null_ratio: BTreeMap<String, f64>,
}

/// Null ratios over all bins of the given grids. Structurally absent columns
/// are left out of both the per-stay denominators and the per-variable table.
pub fn missingness_report(grids: &[VitalGrid], absent: &BTreeSet<String>) -> MissingnessReport {
    let mut report = MissingnessReport::default();
    let mut var_null: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for g in grids {
        let live: Vec<usize> = (0..g.n_vars()).filter(|&j| !absent.contains(&g.columns[j])).collect();
        let mut nulls = 0u64;
        for &j in &live {
            let entry = var_null.entry(g.columns[j].as_str()).or_default();
            for t in 0..g.n_bins {
                let null = g.cell(t, j).value.is_none() as u64;
                nulls += null;
                entry.0 += null;
                entry.1 += 1;
            }
        }
        let total = (live.len() * g.n_bins) as u64;
        let ratio = if total == 0 { 1.0 } else { nulls as f64 / total as f64 };
        report.per_stay_null_ratio.insert(g.stay_id, ratio);
    }
    report.per_variable_null_ratio = var_null
        .into_iter()
        .map(|(k, (n, d))| (k.to_string(), if d == 0 { 1.0 } else { n as f64 / d as f64 }))
        .collect();
    report
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MissingnessOutcome {
    /// Removed stay ids, per source.
    pub removed_stays: BTreeMap<Source, Vec<i64>>,
    /// Variables dropped from every grid of every source.
    pub dropped_variables: Vec<String>,
}

/// Remove stays whose null ratio exceeds `threshold`, and drop variables whose
/// null ratio exceeds it in any source from all sources at once so column
/// sets stay identical. A threshold of 1.0 removes nothing.
pub fn missingness_filter(
    sources: &mut [(Source, &mut Vec<VitalGrid>, &MissingnessReport)],
    threshold: f64,
) -> MissingnessOutcome {
    let mut outcome = MissingnessOutcome::default();
    let mut drop = BTreeSet::new();
    for (source, grids, report) in sources.iter_mut() {
        let removed: Vec<i64> = report
            .per_stay_null_ratio
            .iter()
            .filter(|(_, &r)| r > threshold)
            .map(|(&id, _)| id)
            .collect();
        let removed_set: BTreeSet<i64> = removed.iter().copied().collect();
        grids.retain(|g| !removed_set.contains(&g.stay_id));
        outcome.removed_stays.insert(*source, removed);
        drop.extend(
            report
                .per_variable_null_ratio
                .iter()
                .filter(|(_, &r)| r > threshold)
                .map(|(k, _)| k.clone()),
        );
    }
    for (_, grids, _) in sources.iter_mut() {
        for g in grids.iter_mut() {
            g.drop_columns(&drop);
        }
    }
    outcome.dropped_variables = drop.into_iter().collect();
    outcome
}

/// Per-variable statistics of recorded training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: Vec<u64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

impl Normalizer {
    /// Fit on recorded (indicator = 1) cells of the given training grids,
    /// accumulated in slice order. Population standard deviation.
    pub fn fit<'a>(columns: &[String], train: impl IntoIterator<Item = &'a VitalGrid> + Clone, epsilon: f64) -> Self {
        let n = columns.len();
        let mut sum = vec![0.0; n];
        let mut count = vec![0u64; n];
        let col_maps = |g: &VitalGrid| -> Vec<Option<usize>> {
            g.columns.iter().map(|c| columns.iter().position(|x| x == c)).collect()
        };
        for g in train.clone() {
            let cm = col_maps(g);
            for t in 0..g.n_bins {
                for (j, cell) in g.row(t).iter().enumerate() {
                    if let (Some(k), true, Some(v)) = (cm[j], cell.indicator, cell.value) {
                        sum[k] += v;
                        count[k] += 1;
                    }
                }
            }
        }
        let mean: Vec<f64> = (0..n)
            .map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; n];
        for g in train {
            let cm = col_maps(g);
            for t in 0..g.n_bins {
                for (j, cell) in g.row(t).iter().enumerate() {
                    if let (Some(k), true, Some(v)) = (cm[j], cell.indicator, cell.value) {
                        sq[k] += (v - mean[k]).powi(2);
                    }
                }
            }
        }
        let std = (0..n)
            .map(|k| if count[k] > 0 { (sq[k] / count[k] as f64).sqrt() } else { 1.0 })
            .collect();
        Normalizer {
            columns: columns.to_vec(),
            mean,
            std,
            count,
            epsilon,
        }
    }

    pub fn fitted(&self, k: usize) -> bool {
        self.count[k] > 0
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == id)
    }

    pub fn scale(&self, k: usize, v: f64) -> f64 {
        if self.fitted(k) {
            (v - self.mean[k]) / self.std[k].max(self.epsilon)
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    #[default]
    ForwardFillThenTrainMean,
    None,
}

/// Fill absent cells. Forward fill within each stay and variable; leading gaps
/// take the training mean (0 for variables never recorded in training, which
/// are returned). Indicators are untouched and structurally absent columns
/// stay empty.
pub fn impute(
    grids: &mut [VitalGrid],
    policy: ImputePolicy,
    train_stats: &Normalizer,
    absent: &BTreeSet<String>,
) -> BTreeSet<String> {
    let mut flagged = BTreeSet::new();
    if policy == ImputePolicy::None {
        return flagged;
    }
    if let Some(g) = grids.first() {
        for c in &g.columns {
            if !absent.contains(c) && train_stats.index(c).is_none_or(|k| !train_stats.fitted(k)) {
                flagged.insert(c.clone());
            }
        }
    }
    grids.par_iter_mut().for_each(|g| {
        for j in 0..g.n_vars() {
            if absent.contains(&g.columns[j]) {
                continue;
            }
            let fallback = train_stats
                .index(&g.columns[j])
                .filter(|&k| train_stats.fitted(k))
                .map_or(0.0, |k| train_stats.mean[k]);
            let mut carry = fallback;
            for t in 0..g.n_bins {
                let cell = g.cell_mut(t, j);
                match cell.value {
                    Some(v) => carry = v,
                    None => cell.value = Some(carry),
                }
            }
        }
    });
    flagged
}

/// Standardize every present cell with the training normalizer.
pub fn normalize(grids: &mut [VitalGrid], normalizer: &Normalizer) -> Result<()> {
    let Some(first) = grids.first() else { return Ok(()) };
    let map: Vec<usize> = first
        .columns
        .iter()
        .map(|c| {
            normalizer
                .index(c)
                .ok_or_else(|| Error::Invalid(format!("normalizer has no statistics for column `{c}`")))
        })
        .collect::<Result<_>>()?;
    if grids.iter().any(|g| g.columns != first.columns) {
        return Err(Error::Invalid("grids disagree on column order".into()));
    }
    grids.par_iter_mut().for_each(|g| {
        let n = g.n_vars();
        for (i, cell) in g.cells.iter_mut().enumerate() {
            if let Some(v) = cell.value {
                cell.value = Some(normalizer.scale(map[i % n], v));
            }
        }
    });
    Ok(())
}

/// Permute a grid's columns into `target` order, inserting all-empty columns
/// for targets the grid lacks. A grid column missing from `target` is an
/// error.
pub fn harmonize_to(grid: &VitalGrid, target: &[String]) -> Result<VitalGrid> {
    let pos: HashMap<&str, usize> = grid.columns.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect();
    for c in &grid.columns {
        if !target.contains(c) {
            return Err(Error::Invalid(format!("unknown column `{c}` in stay {}", grid.stay_id)));
        }
    }
    let src: Vec<Option<usize>> = target.iter().map(|c| pos.get(c.as_str()).copied()).collect();
    let mut out = VitalGrid::empty(grid.stay_id, grid.n_bins, target.to_vec());
    for t in 0..grid.n_bins {
        let row = grid.row(t);
        for (k, s) in src.iter().enumerate() {
            if let Some(j) = s {
                *out.cell_mut(t, k) = row[*j];
            }
        }
    }
    Ok(out)
}

/// Registry-order harmonization of an eICU-like grid.
pub fn harmonize_columns(grid: &VitalGrid, maps: &ConceptMaps) -> Result<VitalGrid> {
    let target: Vec<String> = maps.vitals().iter().map(|v| v.id.clone()).collect();
    harmonize_to(grid, &target)
}

/// CSV header of the wide Vital format.
pub fn vital_header(columns: &[String], with_indicators: bool) -> Vec<String> {
    let mut h = vec!["stay_id".to_string(), "bin".to_string()];
    h.extend(columns.iter().cloned());
    if with_indicators {
        h.extend(columns.iter().map(|c| format!("{c}_ind")));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps() -> ConceptMaps {
        ConceptMaps::default_maps()
    }

    fn ev(var: usize, hour: f64, value: f64) -> VitalEvent {
        VitalEvent { var, hour, value }
    }

    fn grid(values: &[&[Option<f64>]]) -> VitalGrid {
        let n_vars = values[0].len();
        let columns = (0..n_vars).map(|j| format!("v{j}")).collect();
        let mut g = VitalGrid::empty(1, values.len(), columns);
        for (t, row) in values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                *g.cell_mut(t, j) = HourlyCell { value: *v, indicator: v.is_some() };
            }
        }
        g
    }

    #[test]
    fn hourly_mean_and_boundaries() {
        let m = maps();
        let vitals = m.vitals();
        let hr = vitals[0];
        let (g, c) = aggregate_hourly(1, &[ev(0, 20.0 / 60.0, 72.0), ev(0, 50.0 / 60.0, 76.0)], &[hr], 3.0, 1, AggregateStat::Mean);
        assert_eq!(*g.cell(0, 0), HourlyCell { value: Some(74.0), indicator: true });
        assert_eq!(*g.cell(1, 0), HourlyCell::EMPTY);
        assert_eq!(c.placed, 2);

        let (g, _) = aggregate_hourly(1, &[ev(0, 1.0, 80.0)], &[hr], 3.0, 1, AggregateStat::Mean);
        assert!(g.cell(0, 0).value.is_none());
        assert_eq!(g.cell(1, 0).value, Some(80.0));

        let (g, c) = aggregate_hourly(1, &[ev(0, -0.5, 80.0), ev(0, 3.0, 80.0)], &[hr], 3.0, 1, AggregateStat::Mean);
        assert!(g.cells.iter().all(|c| *c == HourlyCell::EMPTY));
        assert_eq!((c.before_admission, c.after_discharge), (1, 1));
        assert_eq!(g.n_bins, 3);
    }

    #[test]
    fn other_statistics() {
        let m = maps();
        let hr = m.vitals()[0];
        let evs = [ev(0, 0.1, 70.0), ev(0, 0.7, 90.0), ev(0, 0.4, 71.0)];
        let (g, _) = aggregate_hourly(1, &evs, &[hr], 1.0, 1, AggregateStat::Median);
        assert_eq!(g.cell(0, 0).value, Some(71.0));
        let (g, _) = aggregate_hourly(1, &evs, &[hr], 1.0, 1, AggregateStat::Last);
        assert_eq!(g.cell(0, 0).value, Some(90.0));
    }

    #[test]
    fn outliers() {
        let m = maps();
        let hr = m.vitals()[0];
        assert_eq!(hr.outlier_high, Some(350.0));
        let (mut g, _) = aggregate_hourly(
            1,
            &[ev(0, 0.5, 780.0), ev(0, 1.5, 350.0), ev(0, 2.5, 80.0)],
            &[hr],
            3.0,
            1,
            AggregateStat::Mean,
        );
        assert_eq!(remove_outliers(&mut g, &m), 1);
        assert_eq!(*g.cell(0, 0), HourlyCell::EMPTY);
        assert_eq!(g.cell(1, 0).value, Some(350.0));
        assert_eq!(g.cell(2, 0).value, Some(80.0));
        let before = g.clone();
        assert_eq!(remove_outliers(&mut g, &m), 0);
        assert_eq!(g, before);
    }

    #[test]
    fn missingness() {
        let mut sparse = grid(&vec![&[None, None][..]; 20]);
        *sparse.cell_mut(0, 0) = HourlyCell { value: Some(1.0), indicator: true };
        sparse.stay_id = 1;
        let dense = {
            let mut g = grid(&vec![&[Some(1.0), None][..]; 20]);
            g.stay_id = 2;
            g
        };
        let report = missingness_report(&[sparse.clone(), dense.clone()], &BTreeSet::new());
        assert_eq!(report.per_stay_null_ratio[&1], 39.0 / 40.0);
        assert_eq!(report.per_stay_null_ratio[&2], 0.5);
        assert_eq!(report.per_variable_null_ratio["v1"], 1.0);

        let mut grids = vec![sparse.clone(), dense.clone()];
        let out = missingness_filter(&mut [(Source::MimicLike, &mut grids, &report)], 0.9);
        assert_eq!(out.removed_stays[&Source::MimicLike], vec![1]);
        assert_eq!(out.dropped_variables, vec!["v1".to_string()]);
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].columns, vec!["v0".to_string()]);

        let mut grids = vec![sparse, dense];
        let out = missingness_filter(&mut [(Source::MimicLike, &mut grids, &report)], 1.0);
        assert!(out.dropped_variables.is_empty());
        assert_eq!(grids.len(), 2);
    }

    #[test]
    fn variable_drops_are_shared_across_sources() {
        let a = grid(&[&[Some(1.0), Some(1.0)]]);
        let mut b = grid(&vec![&[Some(1.0), None][..]; 100]);
        *b.cell_mut(0, 1) = HourlyCell { value: Some(2.0), indicator: true };
        let ra = missingness_report(std::slice::from_ref(&a), &BTreeSet::new());
        let rb = missingness_report(std::slice::from_ref(&b), &BTreeSet::new());
        let (mut ga, mut gb) = (vec![a], vec![b]);
        let out = missingness_filter(
            &mut [(Source::MimicLike, &mut ga, &ra), (Source::EicuLike, &mut gb, &rb)],
            2.0 / 3.0,
        );
        assert_eq!(out.dropped_variables, vec!["v1".to_string()]);
        assert_eq!(ga[0].columns, gb[0].columns);
    }

    #[test]
    fn imputation() {
        let mut g = grid(&[&[Some(74.0)], &[None], &[None]]);
        let stats = Normalizer::fit(&["v0".into()], [&grid(&[&[Some(80.0)]])], DEFAULT_EPSILON);
        impute(std::slice::from_mut(&mut g), ImputePolicy::ForwardFillThenTrainMean, &stats, &BTreeSet::new());
        let vals: Vec<_> = g.cells.iter().map(|c| c.value.unwrap()).collect();
        let inds: Vec<_> = g.cells.iter().map(|c| c.indicator).collect();
        assert_eq!(vals, vec![74.0, 74.0, 74.0]);
        assert_eq!(inds, vec![true, false, false]);

        let mut never = grid(&[&[None], &[None]]);
        impute(std::slice::from_mut(&mut never), ImputePolicy::ForwardFillThenTrainMean, &stats, &BTreeSet::new());
        assert!(never.cells.iter().all(|c| c.value == Some(80.0) && !c.indicator));

        let full = grid(&[&[Some(1.0)], &[Some(2.0)]]);
        let mut same = full.clone();
        impute(std::slice::from_mut(&mut same), ImputePolicy::ForwardFillThenTrainMean, &stats, &BTreeSet::new());
        assert_eq!(same, full);

        let mut untouched = grid(&[&[None]]);
        impute(std::slice::from_mut(&mut untouched), ImputePolicy::None, &stats, &BTreeSet::new());
        assert!(untouched.cells[0].value.is_none());

        let absent: BTreeSet<String> = ["v0".to_string()].into();
        let mut structural = grid(&[&[None], &[None]]);
        impute(std::slice::from_mut(&mut structural), ImputePolicy::ForwardFillThenTrainMean, &stats, &absent);
        assert!(structural.cells.iter().all(|c| c.value.is_none()));
    }

    #[test]
    fn unfitted_variable_is_flagged_and_zero_filled() {
        let stats = Normalizer::fit(&["v0".into()], [&grid(&[&[None]])], DEFAULT_EPSILON);
        let mut g = grid(&[&[None]]);
        let flagged = impute(std::slice::from_mut(&mut g), ImputePolicy::ForwardFillThenTrainMean, &stats, &BTreeSet::new());
        assert!(flagged.contains("v0"));
        assert_eq!(g.cells[0].value, Some(0.0));
    }

    #[test]
    fn normalization() {
        let train = grid(&[&[Some(69.0)], &[Some(79.0)]]);
        let n = Normalizer::fit(&["v0".into()], [&train], DEFAULT_EPSILON);
        assert_eq!((n.mean[0], n.std[0]), (74.0, 5.0));
        let mut g = grid(&[&[Some(84.0)]]);
        normalize(std::slice::from_mut(&mut g), &n).unwrap();
        assert_eq!(g.cells[0].value, Some(2.0));

        let identity = Normalizer { columns: vec!["v0".into()], mean: vec![0.0], std: vec![1.0], count: vec![2], epsilon: 1e-6 };
        let mut g = grid(&[&[Some(3.5)]]);
        normalize(std::slice::from_mut(&mut g), &identity).unwrap();
        assert_eq!(g.cells[0].value, Some(3.5));

        let constant = Normalizer::fit(&["v0".into()], [&grid(&[&[Some(5.0)], &[Some(5.0)]])], 1e-6);
        let mut g = grid(&[&[Some(5.5)]]);
        normalize(std::slice::from_mut(&mut g), &constant).unwrap();
        assert!(g.cells[0].value.unwrap().is_finite());

        let mut g = grid(&[&[Some(1.0), Some(2.0)]]);
        assert!(normalize(std::slice::from_mut(&mut g), &n).is_err());
    }

    #[test]
    fn harmonization() {
        let mut g = VitalGrid::empty(1, 2, vec!["b".into(), "a".into()]);
        *g.cell_mut(0, 0) = HourlyCell { value: Some(2.0), indicator: true };
        *g.cell_mut(1, 1) = HourlyCell { value: Some(1.0), indicator: true };
        let h = harmonize_to(&g, &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(h.columns, vec!["a", "b", "c"]);
        assert_eq!(h.cell(0, 1).value, Some(2.0));
        assert_eq!(h.cell(1, 0).value, Some(1.0));
        assert!((0..2).all(|t| *h.cell(t, 2) == HourlyCell::EMPTY));
        assert_eq!(harmonize_to(&h, &h.columns).unwrap(), h);
        assert!(harmonize_to(&g, &["a".into()]).is_err());
    }

    #[test]
    fn eicu_grid_gets_absent_columns() {
        let m = maps();
        let cols: Vec<_> = m.vitals().into_iter().filter(|v| !v.eicu_keys.is_empty()).collect();
        let (g, _) = aggregate_hourly(3, &[ev(0, 0.2, 80.0)], &cols, 5.0, 1, AggregateStat::Mean);
        let h = harmonize_columns(&g, &m).unwrap();
        assert_eq!(h.n_vars(), 92);
        let absent = structurally_absent(&m, Source::EicuLike);
        assert_eq!(absent.len(), 15);
        for c in &absent {
            let j = h.column_index(c).unwrap();
            assert!((0..h.n_bins).all(|t| *h.cell(t, j) == HourlyCell::EMPTY));
        }
    }

    proptest! {
        #[test]
        fn aggregation_is_order_free_and_conserves_events(
            raw in prop::collection::vec((-60i32..900, 1u32..2000, 0usize..3), 0..80),
            seed in any::<u64>(),
        ) {
            let m = maps();
            let vitals = m.vitals();
            let cols = &vitals[..3];
            let evs: Vec<_> = raw.iter().map(|&(min, v, var)| ev(var, min as f64 / 60.0, v as f64 / 8.0)).collect();
            let mut shuffled = evs.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let (a, ca) = aggregate_hourly(1, &evs, cols, 12.0, 1, AggregateStat::Mean);
            let (b, _) = aggregate_hourly(1, &shuffled, cols, 12.0, 1, AggregateStat::Mean);
            for (x, y) in a.cells.iter().zip(&b.cells) {
                prop_assert_eq!(x.indicator, y.indicator);
                match (x.value, y.value) {
                    (Some(p), Some(q)) => prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0)),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
            prop_assert_eq!(ca.placed + ca.before_admission + ca.after_discharge, evs.len() as u64);
        }

        #[test]
        fn pipeline_steps_never_raise_indicators(
            vals in prop::collection::vec(prop::option::of(-100.0f64..500.0), 30),
        ) {
            let m = maps();
            let hr = m.vitals()[0];
            let evs: Vec<_> = vals.iter().enumerate().filter_map(|(t, v)| v.map(|v| ev(0, t as f64 + 0.5, v))).collect();
            let (mut g, _) = aggregate_hourly(1, &evs, &[hr], 30.0, 1, AggregateStat::Mean);
            let raw = g.clone();
            remove_outliers(&mut g, &m);
            for (c, r) in g.cells.iter().zip(&raw.cells) {
                prop_assert!(!c.indicator || r.indicator);
                if let Some(v) = c.value {
                    prop_assert!((0.0..=350.0).contains(&v));
                }
            }
            let stats = Normalizer::fit(&g.columns.clone(), [&g], DEFAULT_EPSILON);
            let post = g.clone();
            impute(std::slice::from_mut(&mut g), ImputePolicy::ForwardFillThenTrainMean, &stats, &BTreeSet::new());
            for (c, p) in g.cells.iter().zip(&post.cells) {
                prop_assert_eq!(c.indicator, p.indicator);
                if p.indicator {
                    prop_assert_eq!(c.value.map(f64::to_bits), p.value.map(f64::to_bits));
                }
            }
            normalize(std::slice::from_mut(&mut g), &stats).unwrap();
            for (c, p) in g.cells.iter().zip(&post.cells) {
                prop_assert_eq!(c.indicator, p.indicator);
            }
        }

        #[test]
        fn normalized_training_cells_are_standard(
            vals in prop::collection::vec(-50.0f64..50.0, 2..60),
        ) {
            let rows: Vec<Vec<Option<f64>>> = vals.iter().map(|v| vec![Some(*v)]).collect();
            let refs: Vec<&[Option<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
            let mut g = grid(&refs);
            let n = Normalizer::fit(&g.columns.clone(), [&g], DEFAULT_EPSILON);
            prop_assume!(n.std[0] > DEFAULT_EPSILON);
            normalize(std::slice::from_mut(&mut g), &n).unwrap();
            let xs: Vec<f64> = g.cells.iter().map(|c| c.value.unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }
}
