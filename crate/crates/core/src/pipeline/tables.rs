//! Readers for stage outputs, and task dataset assembly shared by the
//! pipeline and the standalone train/evaluate commands.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::Source;
use crate::interventions::InterventionGrid;
use crate::labels::Task;
use crate::model::{feature_names, fingerprint, flatten_features, Matrix, SplitPlan, TaskDataset};
use crate::timeseries::{HourlyCell, VitalGrid};

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().from_path(path).map_err(|e| Error::csv(path, e))
}

fn headers(path: &Path, r: &mut csv::Reader<std::fs::File>) -> Result<Vec<String>> {
    Ok(r.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_string).collect())
}

fn bad(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {what}", path.display()))
}

fn cell_f64(path: &Path, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| bad(path, format!("`{s}` is not a number")))
}

fn cell_i64(path: &Path, s: &str) -> Result<i64> {
    s.parse().map_err(|_| bad(path, format!("`{s}` is not an integer")))
}

/// Vital table back into grids. Without indicator columns the indicator is
/// taken as "value present".
pub fn read_vital_csv(path: &Path) -> Result<(Vec<String>, Vec<VitalGrid>)> {
    let mut r = reader(path)?;
    let h = headers(path, &mut r)?;
    if h.len() < 2 || h[0] != "stay_id" || h[1] != "bin" {
        return Err(bad(path, "not a vital table"));
    }
    let rest = &h[2..];
    let half = rest.len() / 2;
    let with_ind = rest.len() % 2 == 0
        && half > 0
        && rest[half..].iter().zip(&rest[..half]).all(|(i, v)| *i == format!("{v}_ind"));
    let columns: Vec<String> = if with_ind { rest[..half].to_vec() } else { rest.to_vec() };
    let v = columns.len();
    let mut grids: Vec<VitalGrid> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let id = cell_i64(path, &rec[0])?;
        let bin = cell_i64(path, &rec[1])? as usize;
        if grids.last().is_none_or(|g| g.stay_id != id) {
            grids.push(VitalGrid { stay_id: id, n_bins: 0, columns: columns.clone(), cells: Vec::new() });
        }
        let g = grids.last_mut().expect("just pushed");
        if bin != g.n_bins {
            return Err(bad(path, format!("stay {id}: bins out of order at {bin}")));
        }
        for j in 0..v {
            let value = cell_f64(path, &rec[2 + j])?;
            let indicator = if with_ind { &rec[2 + v + j] == "1" } else { value.is_some() };
            g.cells.push(HourlyCell { value, indicator });
        }
        g.n_bins += 1;
    }
    Ok((columns, grids))
}

pub fn read_static_csv(path: &Path) -> Result<(Vec<String>, Vec<(i64, Vec<Option<f64>>)>)> {
    let mut r = reader(path)?;
    let h = headers(path, &mut r)?;
    if h.first().map(String::as_str) != Some("stay_id") {
        return Err(bad(path, "not a static table"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let id = cell_i64(path, &rec[0])?;
        let values = rec.iter().skip(1).map(|s| cell_f64(path, s)).collect::<Result<_>>()?;
        rows.push((id, values));
    }
    Ok((h[1..].to_vec(), rows))
}

pub fn read_intervention_csv(path: &Path) -> Result<(Vec<String>, Vec<InterventionGrid>)> {
    let mut r = reader(path)?;
    let h = headers(path, &mut r)?;
    if h.len() < 2 || h[0] != "stay_id" || h[1] != "bin" {
        return Err(bad(path, "not an intervention table"));
    }
    let columns = h[2..].to_vec();
    let mut grids: Vec<InterventionGrid> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let id = cell_i64(path, &rec[0])?;
        if grids.last().is_none_or(|g| g.stay_id != id) {
            grids.push(InterventionGrid { stay_id: id, n_bins: 0, n_vars: columns.len(), cells: Vec::new() });
        }
        let g = grids.last_mut().expect("just pushed");
        g.cells.extend(rec.iter().skip(2).map(|s| u8::from(s == "1")));
        g.n_bins += 1;
    }
    Ok((columns, grids))
}

pub fn split_rows(plan: &SplitPlan) -> Vec<Vec<String>> {
    let mut rows: Vec<(i64, Vec<String>)> = Vec::new();
    for (k, fold) in plan.folds.iter().enumerate() {
        rows.extend(fold.iter().map(|&id| (id, vec![id.to_string(), "train".into(), k.to_string()])));
    }
    rows.extend(plan.test_ids.iter().map(|&id| (id, vec![id.to_string(), "test".into(), String::new()])));
    rows.sort_by_key(|(id, _)| *id);
    rows.into_iter().map(|(_, r)| r).collect()
}

pub fn read_split_csv(path: &Path) -> Result<SplitPlan> {
    let mut r = reader(path)?;
    let mut plan = SplitPlan { seed: 0, train_ids: Vec::new(), test_ids: Vec::new(), folds: Vec::new() };
    let mut folds: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let id = cell_i64(path, &rec[0])?;
        match &rec[1] {
            "train" => {
                plan.train_ids.push(id);
                folds.entry(cell_i64(path, &rec[2])? as usize).or_default().push(id);
            }
            "test" => plan.test_ids.push(id),
            other => return Err(bad(path, format!("unknown split `{other}`"))),
        }
    }
    plan.folds = folds.into_values().collect();
    Ok(plan)
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<(i64, bool)>> {
    let mut r = reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        out.push((cell_i64(path, &rec[0])?, &rec[1] == "1"));
    }
    Ok(out)
}

/// Everything needed to flatten task features for one source.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub source: Source,
    pub window_hours: u32,
    pub with_indicators: bool,
    pub static_columns: Vec<String>,
    pub statics: Vec<(i64, Vec<Option<f64>>)>,
    pub vital_columns: Vec<String>,
    pub vitals: Vec<VitalGrid>,
    pub intervention_columns: Vec<String>,
    pub interventions: Vec<InterventionGrid>,
}

impl FeatureTables {
    /// Read the normalized tables of a finished run for `source`.
    pub fn load(run_dir: &Path, source: Source, window_hours: u32) -> Result<Self> {
        let base = run_dir.join(source.as_str());
        let (static_columns, statics) = read_static_csv(&base.join("04_pre_split/static.csv"))?;
        let vital_path = base.join("04_pre_split/vital.csv");
        let (vital_columns, vitals) = read_vital_csv(&vital_path)?;
        let header_len = reader(&vital_path).and_then(|mut r| headers(&vital_path, &mut r))?.len();
        let (intervention_columns, interventions) = read_intervention_csv(&base.join("02_pre_impute/intervention.csv"))?;
        Ok(FeatureTables {
            source,
            window_hours,
            with_indicators: header_len == 2 + 2 * vital_columns.len() && !vital_columns.is_empty(),
            static_columns,
            statics,
            vital_columns,
            vitals,
            intervention_columns,
            interventions,
        })
    }

    /// Flatten `members` (in the given order) into a task dataset.
    pub fn dataset(&self, task: Task, n_bins: usize, members: &[(i64, bool)]) -> Result<TaskDataset> {
        let names = feature_names(&self.static_columns, &self.vital_columns, &self.intervention_columns, n_bins, self.with_indicators);
        let s: HashMap<i64, usize> = self.statics.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let v: HashMap<i64, usize> = self.vitals.iter().enumerate().map(|(i, g)| (g.stay_id, i)).collect();
        let iv: HashMap<i64, usize> = self.interventions.iter().enumerate().map(|(i, g)| (g.stay_id, i)).collect();
        let mut data = Vec::with_capacity(members.len() * names.len());
        for (id, _) in members {
            let missing = || Error::Invalid(format!("stay {id} is missing from the {} feature tables", self.source));
            let si = *s.get(id).ok_or_else(missing)?;
            let vi = *v.get(id).ok_or_else(missing)?;
            let ii = *iv.get(id).ok_or_else(missing)?;
            let vg = self.vitals[vi].truncated(n_bins);
            let ig = self.interventions[ii].truncated(n_bins);
            flatten_features(&self.statics[si].1, &vg, &ig, n_bins, self.with_indicators, &mut data)?;
        }
        Ok(TaskDataset {
            task,
            source: self.source,
            fingerprint: fingerprint(&names),
            x: Matrix::new(members.len(), names.len(), data)?,
            feature_names: names,
            stay_ids: members.iter().map(|(id, _)| *id).collect(),
            y: members.iter().map(|(_, y)| *y).collect(),
        })
    }
}
