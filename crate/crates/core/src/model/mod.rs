//! Split, flattening, elastic-net baseline, metrics and cross-source
//! evaluation.

pub mod features;
pub mod logreg;
pub mod metrics;
pub mod split;

use serde::{Deserialize, Serialize};

pub use features::{feature_count, feature_names, fingerprint, flatten_features};
pub use logreg::{decision_function, grid_search, objective, smooth_value_and_gradient, train_logreg, Fit, GridResult, HyperGrid, Matrix, SolverSettings};
pub use metrics::{auprc, auroc, bootstrap, bootstrap_ci, percentile, Bootstrap, Metric};
pub use split::{make_split_and_folds, make_stratified_split, SplitPlan, N_FOLDS};

use crate::error::{Error, Result};
use crate::ingest::Source;
use crate::labels::Task;

pub const MODEL_FORMAT: &str = "ehrbridge-linear-model";
pub const MODEL_VERSION: u32 = 1;

/// Flattened task features for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub source: Source,
    pub feature_names: Vec<String>,
    pub fingerprint: String,
    pub stay_ids: Vec<i64>,
    pub x: Matrix,
    pub y: Vec<bool>,
}

impl TaskDataset {
    pub fn rows_of(&self, ids: &[i64]) -> Vec<usize> {
        let pos: std::collections::HashMap<i64, usize> = self.stay_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ids.iter().filter_map(|id| pos.get(id).copied()).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> TaskDataset {
        TaskDataset {
            task: self.task,
            source: self.source,
            feature_names: self.feature_names.clone(),
            fingerprint: self.fingerprint.clone(),
            stay_ids: rows.iter().map(|&i| self.stay_ids[i]).collect(),
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.x.first_non_finite() {
            Some((r, c)) => Err(Error::NonFinite(format!("feature `{}` of stay {}", self.feature_names[c], self.stay_ids[r]))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub source: Source,
    pub feature_fingerprint: String,
    pub n_features: usize,
    pub c: f64,
    pub l1_ratio: f64,
    pub cv_mean_auroc: f64,
    pub converged: bool,
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn check(&self, data: &TaskDataset) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Invalid(format!("unsupported model artifact {} v{}", self.format, self.version)));
        }
        if data.fingerprint != self.feature_fingerprint || data.x.n_cols != self.weights.len() {
            return Err(Error::Fingerprint {
                expected: self.feature_fingerprint.clone(),
                found: data.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Logit scores for every row.
    pub fn score(&self, data: &TaskDataset) -> Result<Vec<f64>> {
        self.check(data)?;
        data.check_finite()?;
        Ok(decision_function(&data.x, &self.weights, self.intercept))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diff {
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub model_source: Source,
    pub data_source: Source,
    pub n: usize,
    pub n_positive: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc_ci: (f64, f64),
    pub bootstrap_resamples: usize,
    pub bootstrap_redraws: u64,
    pub diff_vs_origin: Option<Diff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_boot: 1000, level: 95.0, seed: 0 }
    }
}

pub fn evaluate(model: &LinearModel, data: &TaskDataset, settings: &EvalSettings) -> Result<EvalReport> {
    let scores = model.score(data)?;
    report_from_scores(model, data, &scores, settings)
}

pub fn report_from_scores(model: &LinearModel, data: &TaskDataset, scores: &[f64], settings: &EvalSettings) -> Result<EvalReport> {
    let boot = bootstrap(scores, &data.y, &[Metric::Auroc, Metric::Auprc], settings.n_boot, settings.level, settings.seed)?;
    Ok(EvalReport {
        task: data.task,
        model_source: model.source,
        data_source: data.source,
        n: data.y.len(),
        n_positive: data.y.iter().filter(|&&v| v).count(),
        auroc: auroc(scores, &data.y)?,
        auprc: auprc(scores, &data.y)?,
        auroc_ci: boot.intervals[0],
        auprc_ci: boot.intervals[1],
        bootstrap_resamples: settings.n_boot,
        bootstrap_redraws: boot.redraws,
        diff_vs_origin: None,
    })
}

/// Score the whole target dataset and report deltas against the model's
/// own test-set report.
pub fn cross_evaluate(model: &LinearModel, target: &TaskDataset, origin: &EvalReport, settings: &EvalSettings) -> Result<EvalReport> {
    if target.task != model.task {
        return Err(Error::Invalid(format!("model is for {} but data is for {}", model.task, target.task)));
    }
    let mut r = evaluate(model, target, settings)?;
    r.diff_vs_origin = Some(Diff {
        auroc: r.auroc - origin.auroc,
        auprc: r.auprc - origin.auprc,
    });
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub grid: HyperGrid,
    /// Used for the final refit on all training rows.
    pub solver: SolverSettings,
    /// Used for the cross-validation fits, which only need a ranking.
    pub search: SolverSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            grid: HyperGrid::default(),
            solver: SolverSettings::default(),
            search: SolverSettings { max_iter: 500, tol: 1e-5 },
        }
    }
}

/// Grid search over the folds, then refit on all training rows.
pub fn fit_task_model(data: &TaskDataset, train_rows: &[usize], folds: &[Vec<usize>], settings: &TrainSettings) -> Result<(LinearModel, GridResult)> {
    data.check_finite()?;
    let train = data.subset(train_rows);
    let local: std::collections::HashMap<usize, usize> = train_rows.iter().enumerate().map(|(k, &r)| (r, k)).collect();
    let folds: Vec<Vec<usize>> = folds.iter().map(|f| f.iter().filter_map(|r| local.get(r).copied()).collect()).collect();
    let grid = grid_search(&train.x, &train.y, &folds, &settings.grid, &settings.search)?;
    let fit = train_logreg(&train.x, &train.y, grid.best_c, grid.best_l1_ratio, &settings.solver, None)?;
    Ok((
        LinearModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            task: data.task,
            source: data.source,
            feature_fingerprint: data.fingerprint.clone(),
            n_features: data.x.n_cols,
            c: grid.best_c,
            l1_ratio: grid.best_l1_ratio,
            cv_mean_auroc: grid.best_mean_auroc,
            converged: fit.converged,
            intercept: fit.intercept,
            weights: fit.weights,
        },
        grid,
    ))
}
