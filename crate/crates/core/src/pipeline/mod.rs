//! End-to-end orchestration with exit points.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/manifest.json
//! <out>/<source>/01_raw/           cohort, static, vital, intervention, culture
//! <out>/<source>/02_pre_impute/    after the missingness filter
//! <out>/<source>/03_pre_normalize/ split, imputed static and vital
//! <out>/<source>/04_pre_split/     normalized static and vital, normalizer
//! <out>/<source>/05_full/          labels, models, test-set reports
//! <out>/cross_eval/                <from>_to_<to>_<task>.json, scored on
//!                                  every task member of <to>
//! ```
//!
//! A run stopped at an exit point writes exactly the files a full run
//! writes for the stages up to it.

pub mod output;
pub mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{select_cohort, stay_los, CohortCriteria, Condition, ExclusionReason, Sepsis3Hook, StayStatic};
use crate::concepts::{ConceptMaps, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::ingest::{load_bundle, IngestCounters, Source, StayRecord};
use crate::interventions::{binarize_intervals, resolve_intervals, IntervalCounters, InterventionGrid};
use crate::labels::{build_task_cohort, mortality_label, onset_time, OnsetCondition, Task, TaskInput, TaskSpec};
use crate::model::{cross_evaluate, evaluate, fit_task_model, EvalReport, EvalSettings, LinearModel, SplitPlan, TaskDataset, TrainSettings, N_FOLDS};
use crate::seed;
use crate::timeseries::{
    aggregate_hourly, harmonize_columns, impute, missingness_filter, missingness_report, normalize, remove_outliers,
    structurally_absent, AggregateCounters, AggregateStat, ImputePolicy, MissingnessReport, Normalizer, VitalGrid,
    DEFAULT_EPSILON,
};

use output::{intervention_csv, quoted_csv, simple_csv, static_csv, vital_csv, OutputSink};
use tables::{split_rows, FeatureTables};

pub const MANIFEST_FORMAT: &str = "ehrbridge-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPoint {
    Raw,
    PreImpute,
    PreNormalize,
    PreSplit,
    #[default]
    Full,
}

impl ExitPoint {
    pub const ALL: [ExitPoint; 5] = [ExitPoint::Raw, ExitPoint::PreImpute, ExitPoint::PreNormalize, ExitPoint::PreSplit, ExitPoint::Full];

    /// Stage directory under each source.
    pub fn dir(self) -> &'static str {
        match self {
            ExitPoint::Raw => "01_raw",
            ExitPoint::PreImpute => "02_pre_impute",
            ExitPoint::PreNormalize => "03_pre_normalize",
            ExitPoint::PreSplit => "04_pre_split",
            ExitPoint::Full => "05_full",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExitPoint::Raw => "raw",
            ExitPoint::PreImpute => "pre_impute",
            ExitPoint::PreNormalize => "pre_normalize",
            ExitPoint::PreSplit => "pre_split",
            ExitPoint::Full => "full",
        }
    }
}

impl FromStr for ExitPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let folded: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        ExitPoint::ALL
            .into_iter()
            .find(|e| e.as_str().replace('_', "") == folded)
            .ok_or_else(|| Error::Config(format!("unknown exit point `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_boot: usize,
    /// Two-sided confidence level in percent.
    pub level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_boot: 1000, level: 95.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub source_mimic: Option<PathBuf>,
    pub source_eicu: Option<PathBuf>,
    pub cohort: CohortCriteria,
    /// One stay id per line; used with the custom-id cohort.
    pub custom_id_file: Option<PathBuf>,
    /// Directory with registry/comorbidity/culture/unit overrides.
    pub config_dir: Option<PathBuf>,
    pub impute: ImputePolicy,
    pub aggregate: AggregateStat,
    pub drop_indicators: bool,
    pub exit_point: ExitPoint,
    pub tasks: Vec<Task>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub epsilon: f64,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            source_mimic: None,
            source_eicu: None,
            cohort: CohortCriteria::default(),
            custom_id_file: None,
            config_dir: None,
            impute: ImputePolicy::default(),
            aggregate: AggregateStat::default(),
            drop_indicators: false,
            exit_point: ExitPoint::Full,
            tasks: Task::ALL.to_vec(),
            out: PathBuf::from("ehrbridge-out"),
            seed: 0,
            threads: 0,
            epsilon: DEFAULT_EPSILON,
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sources(&self) -> Vec<(Source, &Path)> {
        let mut v = Vec::new();
        if let Some(p) = &self.source_mimic {
            v.push((Source::MimicLike, p.as_path()));
        }
        if let Some(p) = &self.source_eicu {
            v.push((Source::EicuLike, p.as_path()));
        }
        v
    }

    /// Static checks that need no filesystem access beyond what is named.
    pub fn validate(&self) -> Result<()> {
        if self.sources().is_empty() {
            return Err(Error::Config("at least one source directory is required".into()));
        }
        let mut criteria = self.cohort.clone();
        if criteria.condition == Condition::CustomId && self.custom_id_file.is_some() && criteria.custom_ids.is_none() {
            criteria.custom_ids = Some(vec![0]);
        }
        criteria.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.eval.n_boot == 0 || !(self.eval.level > 0.0 && self.eval.level < 100.0) {
            return Err(Error::Config("eval needs n_boot > 0 and 0 < level < 100".into()));
        }
        if self.train.grid.cs.is_empty() || self.train.grid.l1_ratios.is_empty() {
            return Err(Error::Config("hyperparameter grid is empty".into()));
        }
        if self.train.grid.cs.iter().any(|c| !(*c > 0.0 && c.is_finite()))
            || self.train.grid.l1_ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::Config("grid needs C > 0 and l1_ratio within [0, 1]".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(Error::Config(format!("task {t} listed twice")));
            }
            if f64::from(t.observation_hours()) >= self.cohort.los_max_hours {
                return Err(Error::Config(format!(
                    "task {t} needs {} h of stay but los_max_hours is {}",
                    t.observation_hours(),
                    self.cohort.los_max_hours
                )));
            }
        }
        for (s, p) in self.sources() {
            if !p.is_dir() {
                return Err(Error::Config(format!("{s} source directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Criteria with the custom id list and root seed filled in.
    pub fn resolved_criteria(&self) -> Result<CohortCriteria> {
        let mut c = self.cohort.clone();
        c.seed = self.seed;
        if let Some(path) = &self.custom_id_file {
            c.custom_ids = Some(read_id_file(path)?);
        }
        Ok(c)
    }
}

/// One integer id per line; blank lines and `#` comments are ignored.
pub fn read_id_file(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| Error::Config(format!("{}: `{l}` is not a stay id", path.display()))))
        .collect()
}

/// Per-source seed for split and bootstrap substreams.
pub fn source_seed(root: u64, source: Source) -> u64 {
    seed::substream(root, &format!("source/{source}")).next_u64()
}

fn task_seed(root: u64, name: &str) -> u64 {
    seed::substream(root, name).next_u64()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub members: usize,
    pub positives: usize,
    pub excluded: BTreeMap<String, usize>,
    /// Why no model was trained, if none was.
    pub skipped: Option<String>,
    pub test_auroc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub ingest: IngestCounters,
    pub stays_loaded: usize,
    pub cohort_included: usize,
    pub cohort_excluded: BTreeMap<String, usize>,
    pub aggregate: AggregateCounters,
    pub outliers_removed: u64,
    pub intervals: IntervalCounters,
    pub missingness_removed: usize,
    pub final_stays: usize,
    pub imputation_without_train_mean: Vec<String>,
    pub train_stays: usize,
    pub test_stays: usize,
    pub tasks: BTreeMap<String, TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub concept_schema_version: u32,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub dropped_variables: Vec<String>,
    pub sources: BTreeMap<String, SourceSummary>,
    /// Relative path to SHA-256 hex of every file written, except this one.
    pub files: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
}

/// Run the pipeline up to `config.exit_point`. The manifest is written to
/// `<out>/manifest.json` whether the run succeeds or not.
pub fn run_pipeline(config: &PipelineConfig, sepsis3: Option<&Sepsis3Hook>) -> Result<RunManifest> {
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        concept_schema_version: SCHEMA_VERSION,
        status: "running".into(),
        failed_stage: None,
        error: None,
        config: config.clone(),
        dropped_variables: Vec::new(),
        sources: BTreeMap::new(),
        files: BTreeMap::new(),
        timings: Vec::new(),
    };
    config.validate().map_err(|e| e.at_stage("config"))?;
    let mut sink = OutputSink::new(&config.out).map_err(|e| e.at_stage("config"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")).at_stage("config"))?;
    let result = pool.install(|| Runner { config, sepsis3, manifest: &mut manifest, sink: &mut sink }.run());
    manifest.files = std::mem::take(&mut sink.digests);
    match result {
        Ok(()) => {
            manifest.status = "ok".into();
            write_manifest(&config.out, &manifest)?;
            Ok(manifest)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "unknown".to_string(),
            };
            manifest.status = "failed".into();
            manifest.failed_stage = Some(stage);
            manifest.error = Some(e.to_string());
            if let Err(w) = write_manifest(&config.out, &manifest) {
                log::error!("could not write the failure manifest: {w}");
            }
            Err(e)
        }
    }
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    output::write_atomic(&out.join("manifest.json"), text.as_bytes())
}

/// Per-source state carried between stages. Vectors are parallel and sorted
/// by stay id.
struct SourceState {
    source: Source,
    statics: Vec<StayStatic>,
    vitals: Vec<VitalGrid>,
    interventions: Vec<InterventionGrid>,
    inputs: Vec<TaskInput>,
    static_grids: Vec<VitalGrid>,
    plan: Option<SplitPlan>,
    report: Option<MissingnessReport>,
}

impl SourceState {
    fn ids(&self) -> Vec<i64> {
        self.statics.iter().map(|s| s.key.icu_stay_id).collect()
    }

    fn static_rows(&self) -> Vec<(i64, Vec<Option<f64>>)> {
        if self.static_grids.is_empty() {
            self.statics.iter().map(|s| (s.key.icu_stay_id, s.features.clone())).collect()
        } else {
            self.static_grids.iter().map(|g| (g.stay_id, g.cells.iter().map(|c| c.value).collect())).collect()
        }
    }
}

fn filter_vec<T>(v: &mut Vec<T>, mask: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        i += 1;
        mask[i - 1]
    });
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    sepsis3: Option<&'a Sepsis3Hook>,
    manifest: &'a mut RunManifest,
    sink: &'a mut OutputSink,
}

impl Runner<'_> {
    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.at_stage(stage));
        self.manifest.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    fn summary(&mut self, source: Source) -> &mut SourceSummary {
        self.manifest.sources.entry(source.as_str().to_string()).or_default()
    }

    fn rel(source: Source, exit: ExitPoint, file: &str) -> String {
        format!("{}/{}/{file}", source.as_str(), exit.dir())
    }

    fn run(&mut self) -> Result<()> {
        let config = self.config;
        let maps = self.timed("config", |_| {
            config.resolved_criteria()?.validate()?;
            match &config.config_dir {
                Some(d) => ConceptMaps::from_dir(d),
                None => Ok(ConceptMaps::default_maps()),
            }
        })?;
        let criteria = self.timed("config", |_| config.resolved_criteria())?;

        let mut states = Vec::new();
        for (source, dir) in config.sources() {
            let state = self.timed("ingest", |r| r.raw_stage(source, dir, &criteria, &maps))?;
            states.push(state);
        }
        if config.exit_point == ExitPoint::Raw {
            return Ok(());
        }
        let columns = self.timed("missingness", |r| r.missingness_stage(&mut states, &criteria, &maps))?;
        if config.exit_point == ExitPoint::PreImpute {
            return Ok(());
        }
        let mut normalizers = Vec::new();
        for st in &mut states {
            let n = self.timed("impute", |r| r.impute_stage(st, &columns, &maps))?;
            normalizers.push(n);
        }
        if config.exit_point == ExitPoint::PreNormalize {
            return Ok(());
        }
        for (st, (vn, sn)) in states.iter_mut().zip(&normalizers) {
            self.timed("normalize", |r| r.normalize_stage(st, &columns, vn, sn))?;
        }
        if config.exit_point == ExitPoint::PreSplit {
            return Ok(());
        }
        let mut labeled = Vec::new();
        for st in &states {
            labeled.push(self.timed("labels", |r| r.labels_stage(st, &criteria, &maps))?);
        }
        let mut trained = Vec::new();
        for (st, l) in states.iter().zip(labeled) {
            let t = self.timed("model", |r| r.model_stage(st, l))?;
            trained.push((st.source, t));
        }
        self.timed("cross_eval", |r| r.cross_stage(&trained))?;
        Ok(())
    }

    fn raw_stage(&mut self, source: Source, dir: &Path, criteria: &CohortCriteria, maps: &ConceptMaps) -> Result<SourceState> {
        let bundle = load_bundle(dir, source, maps)?;
        let cohort = select_cohort(criteria, &bundle.stays, maps, self.sepsis3)?;
        let included: BTreeSet<i64> = cohort.included.iter().map(|k| k.icu_stay_id).collect();
        let stays: Vec<&StayRecord> = bundle.stays.iter().filter(|s| included.contains(&s.key.icu_stay_id)).collect();
        let vitals = maps.vitals();
        let n_iv = maps.interventions().len();
        let w = criteria.window_hours;
        let stat = self.config.aggregate;

        struct PerStay {
            stat: StayStatic,
            grid: VitalGrid,
            igrid: InterventionGrid,
            input: TaskInput,
            agg: AggregateCounters,
            outliers: u64,
            ivc: IntervalCounters,
        }
        let per: Vec<PerStay> = stays
            .par_iter()
            .map(|s| -> Result<PerStay> {
                let los = stay_los(s).ok_or_else(|| Error::Invalid(format!("stay {} has no LOS", s.key.icu_stay_id)))?;
                let id = s.key.icu_stay_id;
                let stat_row = crate::cohort::extract_static(s, los, maps);
                let (mut grid, agg) = aggregate_hourly(id, &s.vitals, &vitals, los, w, stat);
                let outliers = remove_outliers(&mut grid, maps);
                if source == Source::EicuLike {
                    grid = harmonize_columns(&grid, maps)?;
                }
                let (intervals, ivc) = resolve_intervals(&s.intervals, los);
                let igrid = binarize_intervals(id, &intervals, grid.n_bins, n_iv, w);
                let input = TaskInput {
                    key: s.key.clone(),
                    los_hours: los,
                    arf_onset: onset_time(&intervals, &s.vitals, los, OnsetCondition::Arf, maps),
                    shock_onset: onset_time(&intervals, &s.vitals, los, OnsetCondition::Shock, maps),
                    mortality: mortality_label(source, &stat_row),
                };
                Ok(PerStay { stat: stat_row, grid, igrid, input, agg, outliers, ivc })
            })
            .collect::<Result<_>>()?;

        let mut summary = SourceSummary {
            ingest: bundle.counters.clone(),
            stays_loaded: bundle.stays.len(),
            cohort_included: cohort.included.len(),
            ..Default::default()
        };
        for (_, reason) in &cohort.excluded {
            *summary.cohort_excluded.entry(reason.to_string()).or_default() += 1;
        }
        let mut state = SourceState {
            source,
            statics: Vec::with_capacity(per.len()),
            vitals: Vec::with_capacity(per.len()),
            interventions: Vec::with_capacity(per.len()),
            inputs: Vec::with_capacity(per.len()),
            static_grids: Vec::new(),
            plan: None,
            report: None,
        };
        for p in per {
            summary.aggregate.add(&p.agg);
            summary.outliers_removed += p.outliers;
            summary.intervals.add(&p.ivc);
            state.statics.push(p.stat);
            state.vitals.push(p.grid);
            state.interventions.push(p.igrid);
            state.inputs.push(p.input);
        }
        *self.summary(source) = summary;

        let raw = |f: &str| Self::rel(source, ExitPoint::Raw, f);
        let cohort_rows = state.statics.iter().map(|s| {
            vec![
                s.key.icu_stay_id.to_string(),
                s.key.subject_id.map(|v| v.to_string()).unwrap_or_default(),
                s.key.hadm_id.map(|v| v.to_string()).unwrap_or_default(),
                s.los_hours.to_string(),
                s.gender.clone(),
                s.ethnicity.label().to_string(),
                s.admission_era.clone(),
                s.hospital_mortality.as_str().to_string(),
                s.icu_mortality.as_str().to_string(),
            ]
        });
        let bytes = quoted_csv(
            &["stay_id", "subject_id", "hadm_id", "los_hours", "gender", "ethnicity", "admission_era", "hospital_mortality", "icu_mortality"],
            cohort_rows,
        )?;
        self.sink.write(&raw("cohort.csv"), &bytes)?;
        let excluded = cohort.excluded.iter().map(|(k, r)| vec![k.icu_stay_id.to_string(), reason_str(*r).to_string()]);
        self.sink.write(&raw("cohort_excluded.csv"), &simple_csv(&["stay_id", "reason"], excluded))?;
        self.write_tables(&state, ExitPoint::Raw, &vitals.iter().map(|v| v.id.clone()).collect::<Vec<_>>(), maps)?;
        let culture_rows = stays.iter().flat_map(|s| {
            s.cultures
                .iter()
                .map(move |c| vec![s.key.icu_stay_id.to_string(), c.hour.to_string(), c.category.clone()])
        });
        self.sink.write(&raw("culture.csv"), &quoted_csv(&["stay_id", "hour", "category"], culture_rows)?)?;
        Ok(state)
    }

    fn write_tables(&mut self, st: &SourceState, exit: ExitPoint, columns: &[String], maps: &ConceptMaps) -> Result<()> {
        let with_ind = !self.config.drop_indicators;
        let static_cols: Vec<String> = maps.statics().iter().map(|v| v.id.clone()).collect();
        let iv_cols: Vec<String> = maps.interventions().iter().map(|v| v.id.clone()).collect();
        self.sink.write(&Self::rel(st.source, exit, "static.csv"), &static_csv(&static_cols, &st.static_rows()))?;
        self.sink.write(&Self::rel(st.source, exit, "vital.csv"), &vital_csv(&st.vitals, columns, with_ind))?;
        if exit <= ExitPoint::PreImpute {
            self.sink.write(&Self::rel(st.source, exit, "intervention.csv"), &intervention_csv(&st.interventions, &iv_cols))?;
        }
        Ok(())
    }

    fn missingness_stage(&mut self, states: &mut [SourceState], criteria: &CohortCriteria, maps: &ConceptMaps) -> Result<Vec<String>> {
        for st in states.iter_mut() {
            let absent = structurally_absent(maps, st.source);
            st.report = Some(missingness_report(&st.vitals, &absent));
        }
        let reports: Vec<MissingnessReport> = states.iter().map(|s| s.report.clone().expect("set above")).collect();
        let mut grids: Vec<(Source, Vec<VitalGrid>)> = states.iter_mut().map(|s| (s.source, std::mem::take(&mut s.vitals))).collect();
        let outcome = {
            let mut refs: Vec<(Source, &mut Vec<VitalGrid>, &MissingnessReport)> =
                grids.iter_mut().zip(&reports).map(|((s, g), r)| (*s, g, r)).collect();
            missingness_filter(&mut refs, criteria.missingness_threshold)
        };
        let dropped: BTreeSet<String> = outcome.dropped_variables.iter().cloned().collect();
        let columns: Vec<String> = maps.vitals().iter().map(|v| v.id.clone()).filter(|c| !dropped.contains(c)).collect();
        self.manifest.dropped_variables = outcome.dropped_variables.clone();
        for (st, (_, g)) in states.iter_mut().zip(grids) {
            let removed: BTreeSet<i64> = outcome.removed_stays.get(&st.source).into_iter().flatten().copied().collect();
            let keep: BTreeSet<i64> = st.ids().into_iter().filter(|id| !removed.contains(id)).collect();
            st.vitals = g;
            let all_ids = st.ids();
            let mask: Vec<bool> = all_ids.iter().map(|id| keep.contains(id)).collect();
            filter_vec(&mut st.statics, &mask);
            filter_vec(&mut st.interventions, &mask);
            filter_vec(&mut st.inputs, &mask);
            let report = st.report.as_ref().expect("set above");
            let summary = self.summary(st.source);
            summary.missingness_removed = removed.len();
            summary.final_stays = keep.len();

            let pre = |f: &str| Self::rel(st.source, ExitPoint::PreImpute, f);
            let removed_rows = removed.iter().map(|id| vec![id.to_string(), report.per_stay_null_ratio[id].to_string()]);
            self.sink.write(&pre("missingness_removed.csv"), &simple_csv(&["stay_id", "null_ratio"], removed_rows))?;
            let var_rows = report.per_variable_null_ratio.iter().map(|(v, r)| {
                vec![v.clone(), r.to_string(), if dropped.contains(v) { "1" } else { "0" }.to_string()]
            });
            self.sink.write(&pre("missingness_variables.csv"), &simple_csv(&["variable", "null_ratio", "dropped"], var_rows))?;
            self.write_tables(st, ExitPoint::PreImpute, &columns, maps)?;
        }
        Ok(columns)
    }

    /// Split, then impute vitals and statics with training statistics.
    fn impute_stage(&mut self, st: &mut SourceState, columns: &[String], maps: &ConceptMaps) -> Result<(Normalizer, Normalizer)> {
        let plan = crate::model::make_split_and_folds(&st.ids(), source_seed(self.config.seed, st.source))?;
        let train: BTreeSet<i64> = plan.train_ids.iter().copied().collect();
        let eps = self.config.epsilon;
        let absent: BTreeSet<String> = structurally_absent(maps, st.source).into_iter().filter(|c| columns.contains(c)).collect();
        let vital_norm = Normalizer::fit(columns, st.vitals.iter().filter(|g| train.contains(&g.stay_id)), eps);
        let flagged = impute(&mut st.vitals, self.config.impute, &vital_norm, &absent);

        let static_cols: Vec<String> = maps.statics().iter().map(|v| v.id.clone()).collect();
        st.static_grids = st
            .statics
            .iter()
            .map(|s| {
                let mut g = VitalGrid::empty(s.key.icu_stay_id, 1, static_cols.clone());
                for (c, v) in g.cells.iter_mut().zip(&s.features) {
                    c.value = *v;
                    c.indicator = v.is_some();
                }
                g
            })
            .collect();
        let static_norm = Normalizer::fit(&static_cols, st.static_grids.iter().filter(|g| train.contains(&g.stay_id)), eps);
        impute(&mut st.static_grids, self.config.impute, &static_norm, &BTreeSet::new());

        let summary = self.summary(st.source);
        summary.imputation_without_train_mean = flagged.into_iter().collect();
        summary.train_stays = plan.train_ids.len();
        summary.test_stays = plan.test_ids.len();
        let rel = Self::rel(st.source, ExitPoint::PreNormalize, "split.csv");
        self.sink.write(&rel, &simple_csv(&["stay_id", "set", "fold"], split_rows(&plan)))?;
        st.plan = Some(plan);
        self.write_tables(st, ExitPoint::PreNormalize, columns, maps)?;
        Ok((vital_norm, static_norm))
    }

    fn normalize_stage(&mut self, st: &mut SourceState, columns: &[String], vn: &Normalizer, sn: &Normalizer) -> Result<()> {
        normalize(&mut st.vitals, vn)?;
        normalize(&mut st.static_grids, sn)?;
        #[derive(Serialize)]
        struct Normalizers<'a> {
            vital: &'a Normalizer,
            r#static: &'a Normalizer,
        }
        self.sink
            .write_json(&Self::rel(st.source, ExitPoint::PreSplit, "normalizer.json"), &Normalizers { vital: vn, r#static: sn })?;
        let maps_statics: Vec<String> = sn.columns.clone();
        let with_ind = !self.config.drop_indicators;
        self.sink
            .write(&Self::rel(st.source, ExitPoint::PreSplit, "static.csv"), &static_csv(&maps_statics, &st.static_rows()))?;
        self.sink
            .write(&Self::rel(st.source, ExitPoint::PreSplit, "vital.csv"), &vital_csv(&st.vitals, columns, with_ind))?;
        Ok(())
    }

    /// Task cohorts, label files and flattened feature matrices.
    fn labels_stage(&mut self, st: &SourceState, criteria: &CohortCriteria, maps: &ConceptMaps) -> Result<Vec<Labeled>> {
        let tables = FeatureTables {
            source: st.source,
            window_hours: criteria.window_hours,
            with_indicators: !self.config.drop_indicators,
            static_columns: maps.statics().iter().map(|v| v.id.clone()).collect(),
            statics: st.static_rows(),
            vital_columns: st.vitals.first().map(|g| g.columns.clone()).unwrap_or_default(),
            vitals: st.vitals.clone(),
            intervention_columns: maps.interventions().iter().map(|v| v.id.clone()).collect(),
            interventions: st.interventions.clone(),
        };
        let mut out = Vec::new();
        for &task in &self.config.tasks {
            let spec = TaskSpec::new(task, criteria.gap_hours);
            let cohort = build_task_cohort(spec, &st.inputs, criteria.los_max_hours)?;
            let full = |f: String| Self::rel(st.source, ExitPoint::Full, &f);
            let labels = cohort.members.iter().map(|(k, y)| vec![k.icu_stay_id.to_string(), u8::from(*y).to_string()]);
            self.sink.write(&full(format!("labels_{task}.csv")), &simple_csv(&["stay_id", "label"], labels))?;
            let excl = cohort.excluded.iter().map(|(k, r)| vec![k.icu_stay_id.to_string(), r.as_str().to_string()]);
            self.sink.write(&full(format!("excluded_{task}.csv")), &simple_csv(&["stay_id", "reason"], excl))?;

            let mut summary = TaskSummary { members: cohort.members.len(), positives: cohort.positives(), ..Default::default() };
            for (_, r) in &cohort.excluded {
                *summary.excluded.entry(r.as_str().to_string()).or_default() += 1;
            }
            let members: Vec<(i64, bool)> = cohort.members.iter().map(|(k, y)| (k.icu_stay_id, *y)).collect();
            let data = tables.dataset(task, spec.n_bins(criteria.window_hours), &members)?;
            out.push(Labeled { task, data, summary });
        }
        Ok(out)
    }

    fn model_stage(&mut self, st: &SourceState, labeled: Vec<Labeled>) -> Result<Vec<Trained>> {
        let plan = st.plan.as_ref().expect("split made before training");
        let mut out = Vec::new();
        for Labeled { task, data, mut summary } in labeled {
            let full = |f: String| Self::rel(st.source, ExitPoint::Full, &f);
            let train_rows = rows_in(&data, plan, RowSet::Train);
            let test_rows = rows_in(&data, plan, RowSet::Test);
            let folds = fold_rows(&data, plan);
            let classes = |rows: &[usize]| {
                let pos = rows.iter().filter(|&&i| data.y[i]).count();
                pos > 0 && pos < rows.len()
            };
            let skip = if train_rows.len() < N_FOLDS {
                Some(format!("{} training stays, need at least {N_FOLDS}", train_rows.len()))
            } else if !classes(&train_rows) {
                Some("training labels hold a single class".to_string())
            } else if !classes(&test_rows) {
                Some("test labels hold a single class".to_string())
            } else {
                None
            };
            if let Some(reason) = skip {
                log::warn!("{} {task}: no model trained: {reason}", st.source);
                summary.skipped = Some(reason);
                self.summary(st.source).tasks.insert(task.to_string(), summary);
                continue;
            }
            let (model, _) = fit_task_model(&data, &train_rows, &folds, &self.config.train)?;
            let test = data.subset(&test_rows);
            let settings = EvalSettings {
                n_boot: self.config.eval.n_boot,
                level: self.config.eval.level,
                seed: task_seed(self.config.seed, &format!("bootstrap/{}/{task}", st.source)),
            };
            let report = evaluate(&model, &test, &settings)?;
            self.sink.write_json(&full(format!("model_{task}.json")), &model)?;
            self.sink.write_json(&full(format!("eval_{task}.json")), &report)?;
            summary.test_auroc = Some(report.auroc);
            self.summary(st.source).tasks.insert(task.to_string(), summary);
            out.push(Trained { task, model, report, all: data });
        }
        Ok(out)
    }

    fn cross_stage(&mut self, trained: &[(Source, Vec<Trained>)]) -> Result<()> {
        for (from, models) in trained {
            for (to, targets) in trained {
                if from == to {
                    continue;
                }
                for m in models {
                    let Some(t) = targets.iter().find(|t| t.task == m.task) else { continue };
                    let settings = EvalSettings {
                        n_boot: self.config.eval.n_boot,
                        level: self.config.eval.level,
                        seed: task_seed(self.config.seed, &format!("bootstrap/cross/{from}/{to}/{}", m.task)),
                    };
                    let report = cross_evaluate(&m.model, &t.all, &m.report, &settings)?;
                    self.sink.write_json(&format!("cross_eval/{from}_to_{to}_{}.json", m.task), &report)?;
                }
            }
        }
        Ok(())
    }
}

/// Manifest of an earlier run.
pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Which rows of a finished run a standalone command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSet {
    Train,
    Test,
    All,
}

/// Task dataset rebuilt from the normalized tables of a run that reached at
/// least the pre-split exit point. Labels default to the run's own label
/// file for the task. Returns the dataset and the run's split.
pub fn run_task_dataset(run_dir: &Path, source: Source, task: Task, labels: Option<&Path>) -> Result<(TaskDataset, SplitPlan)> {
    let manifest = read_manifest(run_dir)?;
    let criteria = &manifest.config.cohort;
    let tables = FeatureTables::load(run_dir, source, criteria.window_hours)?;
    let default_labels = run_dir.join(source.as_str()).join(ExitPoint::Full.dir()).join(format!("labels_{task}.csv"));
    let members = tables::read_labels_csv(labels.unwrap_or(&default_labels))?;
    let n_bins = TaskSpec::new(task, criteria.gap_hours).n_bins(criteria.window_hours);
    let data = tables.dataset(task, n_bins, &members)?;
    let plan = tables::read_split_csv(&run_dir.join(source.as_str()).join(ExitPoint::PreNormalize.dir()).join("split.csv"))?;
    Ok((data, plan))
}

/// Row indices of `data` that fall in `set`.
pub fn rows_in(data: &TaskDataset, plan: &SplitPlan, set: RowSet) -> Vec<usize> {
    let pick: BTreeSet<i64> = match set {
        RowSet::Train => plan.train_ids.iter().copied().collect(),
        RowSet::Test => plan.test_ids.iter().copied().collect(),
        RowSet::All => return (0..data.stay_ids.len()).collect(),
    };
    (0..data.stay_ids.len()).filter(|&i| pick.contains(&data.stay_ids[i])).collect()
}

/// Training folds of `plan` as row indices of `data`.
pub fn fold_rows(data: &TaskDataset, plan: &SplitPlan) -> Vec<Vec<usize>> {
    let row_of: HashMap<i64, usize> = data.stay_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    plan.folds.iter().map(|f| f.iter().filter_map(|id| row_of.get(id).copied()).collect()).collect()
}

struct Labeled {
    task: Task,
    data: TaskDataset,
    summary: TaskSummary,
}

struct Trained {
    task: Task,
    model: LinearModel,
    report: EvalReport,
    /// Every task member of the source, used as a cross-evaluation target.
    all: TaskDataset,
}

fn reason_str(r: ExclusionReason) -> &'static str {
    match r {
        ExclusionReason::AgeOut => "AgeOut",
        ExclusionReason::LosOut => "LosOut",
        ExclusionReason::MissingnessOut => "MissingnessOut",
        ExclusionReason::ConditionUnmet => "ConditionUnmet",
        ExclusionReason::NotInCustomList => "NotInCustomList",
    }
}
