//! Synthetic source bundles with planted ground truth.
//!
//! A latent cohort (integer-minute event times, canonical values) is drawn
//! once and rendered into either export family. Expected outputs are
//! computed from the latent cohort with plain loops in [`oracle`], without
//! calling the extraction code.

pub mod oracle;
mod render;

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortCriteria;
use crate::concepts::ConceptMaps;
use crate::error::{Error, Result};
use crate::ingest::Source;
use crate::interventions::{ARF_INTERVENTIONS, PEEP_VARIABLE, VASOPRESSORS};
use crate::seed;

pub use oracle::{expectations, ExpectedStay, ExpectedTask, OracleExpectations, PlantedCell};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnsetSchedule {
    /// Baseline fraction of stays with an onset.
    pub fraction: f64,
    /// Onset hours to draw from; empty means uniform over the stay.
    pub hours: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub seed: u64,
    pub n_stays: usize,
    pub first_stay_id: i64,
    /// Vital variables that receive events. PEEP is driven by the ARF schedule.
    pub variables: Vec<String>,
    /// Events per hour per variable.
    pub event_rate: f64,
    pub event_rates: BTreeMap<String, f64>,
    /// Planted out-of-range cells per variable.
    pub outliers: BTreeMap<String, usize>,
    /// Value for planted outliers of a variable; default is above the range.
    pub outlier_values: BTreeMap<String, f64>,
    /// Cells planted exactly on a range bound (kept by the cleaner).
    pub boundary_plants: usize,
    pub intervals_per_stay: f64,
    pub arf: OnsetSchedule,
    pub shock: OnsetSchedule,
    pub mortality_rate: f64,
    pub unknown_mortality_fraction: f64,
    /// Stays with too few events to pass the missingness threshold.
    pub missing_stay_fraction: f64,
    /// Effect of each variable's per-stay latent level on outcome log-odds.
    pub signal: BTreeMap<String, f64>,
    pub los_hours: (f64, f64),
    pub age_years: (u32, u32),
    pub cultures_per_stay: f64,
    /// Share of MIMIC-like temperature rows rendered in °F.
    pub fahrenheit_fraction: f64,
    /// Criteria the expectations are computed under.
    pub criteria: CohortCriteria,
}

pub const DEFAULT_VARIABLES: &[&str] = &[
    "heart_rate", "sbp", "dbp", "mbp", "resp_rate", "temperature", "spo2", "gcs_motor", "fio2", "urine_output",
    "glucose", "potassium", "sodium", "chloride", "bicarbonate", "bun", "creatinine", "hemoglobin", "platelets", "wbc",
    "lactate", "ph", "d_dimer", "ferritin", "urine_ph",
];

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            seed: 0,
            n_stays: 200,
            first_stay_id: 300001,
            variables: DEFAULT_VARIABLES.iter().map(|s| s.to_string()).collect(),
            event_rate: 2.0,
            event_rates: BTreeMap::new(),
            outliers: [("heart_rate".to_string(), 5)].into(),
            outlier_values: [("heart_rate".to_string(), 780.0)].into(),
            boundary_plants: 5,
            intervals_per_stay: 2.0,
            arf: OnsetSchedule { fraction: 0.3, hours: vec![] },
            shock: OnsetSchedule { fraction: 0.3, hours: vec![] },
            mortality_rate: 0.1,
            unknown_mortality_fraction: 0.02,
            missing_stay_fraction: 0.05,
            signal: BTreeMap::new(),
            los_hours: (12.0, 120.0),
            age_years: (16, 89),
            cultures_per_stay: 1.0,
            fahrenheit_fraction: 0.5,
            criteria: CohortCriteria::default(),
        }
    }
}

impl Default for OnsetSchedule {
    fn default() -> Self {
        OnsetSchedule { fraction: 0.0, hours: vec![] }
    }
}

impl PlantSpec {
    pub fn validate(&self, maps: &ConceptMaps) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be within [0, 1], got {v}")))
            }
        };
        frac("arf.fraction", self.arf.fraction)?;
        frac("shock.fraction", self.shock.fraction)?;
        frac("mortality_rate", self.mortality_rate)?;
        frac("unknown_mortality_fraction", self.unknown_mortality_fraction)?;
        frac("missing_stay_fraction", self.missing_stay_fraction)?;
        frac("fahrenheit_fraction", self.fahrenheit_fraction)?;
        let rates = std::iter::once(self.event_rate)
            .chain(self.event_rates.values().copied())
            .chain([self.intervals_per_stay, self.cultures_per_stay]);
        for r in rates {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("rates must be non-negative, got {r}")));
            }
        }
        if !(self.los_hours.0 > 0.0 && self.los_hours.0 <= self.los_hours.1) || self.age_years.0 > self.age_years.1 {
            return Err(Error::Config("bad LOS or age range".into()));
        }
        for id in self.variables.iter().chain(self.outliers.keys()).chain(self.signal.keys()) {
            match maps.variable(id) {
                Some(v) if v.kind == crate::concepts::VariableKind::NumericVital => {}
                _ => return Err(Error::Config(format!("`{id}` is not a numeric vital"))),
            }
        }
        for h in self.arf.hours.iter().chain(&self.shock.hours) {
            if !(*h >= 0.0) || (h * 60.0).fract() != 0.0 {
                return Err(Error::Config(format!("onset hour {h} must be a non-negative whole minute")));
            }
        }
        self.criteria.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Medical,
    Surgical,
    Cardiac,
    Neuro,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EthnicityKind {
    AmericanIndian,
    Asian,
    Hispanic,
    Black,
    Other,
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEvent {
    /// Registry vital position.
    pub var: usize,
    pub minute: i64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentInterval {
    /// Registry intervention position.
    pub var: usize,
    pub start: Option<i64>,
    pub end: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnosis {
    /// Dotless, upper-case.
    pub icd9: String,
    /// Same-condition ICD-10 code recorded alongside.
    pub icd10: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStay {
    pub stay_id: i64,
    pub subject_id: i64,
    pub hadm_id: i64,
    pub age: u32,
    pub male: bool,
    pub ethnicity: EthnicityKind,
    pub unit: UnitKind,
    /// Minutes from the synthetic epoch to ICU admission.
    pub admit_minute: i64,
    pub anchor_shift_years: i32,
    pub era: (i32, i32),
    pub discharge_year: i32,
    pub los_minutes: i64,
    pub died: bool,
    /// Unit discharge status left blank in eICU-like exports.
    pub eicu_status_unknown: bool,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub fahrenheit: bool,
    pub sparse: bool,
    pub diagnoses: Vec<LatentDiagnosis>,
    pub events: Vec<LatentEvent>,
    pub intervals: Vec<LatentInterval>,
    pub cultures: Vec<(i64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCohort {
    pub spec: PlantSpec,
    pub stays: Vec<LatentStay>,
    pub outliers: Vec<PlantedCell>,
    pub boundary: Vec<PlantedCell>,
}

struct Draw(ChaCha20Rng);

impl Draw {
    fn unit(&mut self) -> f64 {
        seed::unit_f64(&mut self.0)
    }
    fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }
    fn int(&mut self, lo: i64, hi_inclusive: i64) -> i64 {
        lo + seed::below(&mut self.0, (hi_inclusive - lo + 1) as usize) as i64
    }
    fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[seed::below(&mut self.0, xs.len())]
    }
    /// Draw count with mean `mean`: floor plus a Bernoulli remainder.
    fn count(&mut self, mean: f64) -> usize {
        let base = mean.floor();
        base as usize + usize::from(self.chance(mean - base))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Round to a multiple of 1/16 so that bin sums are exact in any order.
fn dyadic(v: f64) -> f64 {
    (v * 16.0).round() / 16.0
}

fn normal_value(lo: f64, hi: f64, level: f64, noise: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    let hw = 0.2 * (hi - lo);
    let v = dyadic(mid + hw * (0.5 * level + 0.5 * noise));
    let (lo_q, hi_q) = ((lo * 16.0).ceil() / 16.0, (hi * 16.0).floor() / 16.0);
    v.clamp(lo_q, hi_q)
}

/// Draw the shared latent cohort.
pub fn generate_latent(spec: &PlantSpec, maps: &ConceptMaps) -> Result<LatentCohort> {
    spec.validate(maps)?;
    let mut r = Draw(seed::substream(spec.seed, "synth/latent"));
    let pos = |id: &str| maps.variable(id).map(|v| v.output_position);
    let peep = pos(PEEP_VARIABLE).ok_or_else(|| Error::Config("registry lacks peep".into()))?;
    let vent: Vec<usize> = ARF_INTERVENTIONS.iter().filter_map(|id| pos(id)).collect();
    let vaso: Vec<usize> = VASOPRESSORS.iter().filter_map(|id| pos(id)).collect();
    let background: Vec<usize> = maps
        .interventions()
        .iter()
        .map(|v| v.output_position)
        .filter(|p| !vent.contains(p) && !vaso.contains(p))
        .collect();
    let vitals = maps.vitals();
    let generated: Vec<usize> = spec
        .variables
        .iter()
        .filter(|id| id.as_str() != PEEP_VARIABLE)
        .filter_map(|id| pos(id))
        .collect();
    let site_keys: Vec<String> = {
        let mut v: Vec<String> = maps.culture_site_keys().into_iter().map(str::to_string).collect();
        v.push("synthetic unlisted site".into());
        v
    };
    let comorb = maps.comorbidities();
    let w_min = i64::from(spec.criteria.window_hours) * 60;

    let mut stays = Vec::with_capacity(spec.n_stays);
    for i in 0..spec.n_stays {
        let stay_id = spec.first_stay_id + i as i64;
        let los_minutes = r.int((spec.los_hours.0 * 60.0).round() as i64, (spec.los_hours.1 * 60.0).round() as i64).max(1);
        let levels: BTreeMap<usize, f64> = generated.iter().map(|&v| (v, r.unit() * 2.0 - 1.0)).collect();
        let risk: f64 = spec
            .signal
            .iter()
            .filter_map(|(id, coef)| pos(id).and_then(|p| levels.get(&p)).map(|z| coef * z))
            .sum();
        let sparse = r.chance(spec.missing_stay_fraction);
        let mut events = Vec::new();
        for &v in &generated {
            let var = vitals[v];
            let (lo, hi) = (var.outlier_low.unwrap_or(0.0), var.outlier_high.unwrap_or(100.0));
            let rate = spec.event_rates.get(&var.id).copied().unwrap_or(spec.event_rate);
            let n = if sparse { usize::from(v == generated[0]) } else { r.count(rate * los_minutes as f64 / 60.0) };
            for _ in 0..n {
                let minute = r.int(-30, los_minutes + 29);
                let noise = r.unit() * 2.0 - 1.0;
                events.push(LatentEvent { var: v, minute, value: normal_value(lo, hi, levels[&v], noise) });
            }
        }

        let mut intervals = Vec::new();
        let shock_p = sigmoid(logit(spec.shock.fraction) + risk);
        if spec.shock.fraction > 0.0 && r.chance(shock_p) {
            let onset = onset_minute(&mut r, &spec.shock, los_minutes);
            let dur = r.int(60, 600);
            intervals.push(LatentInterval { var: *r.pick(&vaso), start: Some(onset), end: Some(onset + dur) });
            if r.chance(0.3) {
                let later = r.int(onset, onset + 600);
                intervals.push(LatentInterval { var: *r.pick(&vaso), start: Some(later), end: Some(later + 120) });
            }
        }
        let arf_p = sigmoid(logit(spec.arf.fraction) + risk);
        if spec.arf.fraction > 0.0 && r.chance(arf_p) {
            let onset = onset_minute(&mut r, &spec.arf, los_minutes);
            if r.chance(0.5) {
                let end = if r.chance(0.1) { None } else { Some(onset + r.int(120, 2000)) };
                intervals.push(LatentInterval { var: vent[0], start: Some(onset), end });
            }
            // a positive PEEP record at the onset or later
            let first_peep = if intervals.iter().any(|iv| iv.var == vent[0] && iv.start == Some(onset)) {
                onset + r.int(0, 120)
            } else {
                onset
            };
            let mut m = first_peep;
            while m < los_minutes {
                events.push(LatentEvent { var: peep, minute: m, value: dyadic(5.0 + 10.0 * r.unit()) });
                m += r.int(60, 240);
            }
        }
        for _ in 0..r.count(spec.intervals_per_stay) {
            let start = r.int(-120, los_minutes);
            let dur = r.int(30, 720);
            let start = if r.chance(0.05) { None } else { Some(start) };
            let end = if r.chance(0.1) { None } else { start.map(|s| s + dur).or(Some(dur)) };
            intervals.push(LatentInterval { var: *r.pick(&background), start, end });
        }

        let died = r.chance(sigmoid(logit(spec.mortality_rate) + risk));
        let mut diagnoses = Vec::new();
        for _ in 0..r.count(1.5) {
            let def = r.pick(comorb);
            if def.icd9.is_empty() {
                continue;
            }
            let prefix = r_pick_owned(&mut r, &def.icd9);
            let icd9 = pad_code(&mut r, prefix, 5);
            let icd10 = (!def.icd10.is_empty() && r.chance(0.3)).then(|| {
                let c = r_pick_owned(&mut r, &def.icd10);
                pad_code(&mut r, c, 4)
            });
            diagnoses.push(LatentDiagnosis { icd9, icd10 });
        }

        let cultures = (0..r.count(spec.cultures_per_stay))
            .map(|_| (r.int(-60, los_minutes), r.pick(&site_keys).clone()))
            .collect();
        let eras = [(2008, 2010), (2011, 2013), (2014, 2016), (2017, 2019)];
        stays.push(LatentStay {
            stay_id,
            subject_id: 10_000_000 + stay_id,
            hadm_id: 20_000_000 + stay_id,
            age: r.int(i64::from(spec.age_years.0), i64::from(spec.age_years.1)) as u32,
            male: r.chance(0.55),
            ethnicity: *r.pick(&[
                EthnicityKind::AmericanIndian,
                EthnicityKind::Asian,
                EthnicityKind::Hispanic,
                EthnicityKind::Black,
                EthnicityKind::Other,
                EthnicityKind::White,
                EthnicityKind::White,
                EthnicityKind::White,
            ]),
            unit: *r.pick(&[UnitKind::Medical, UnitKind::Surgical, UnitKind::Cardiac, UnitKind::Neuro, UnitKind::Other]),
            admit_minute: r.int(0, 365 * 1440 * 3),
            anchor_shift_years: r.int(0, 2) as i32,
            era: *r.pick(&eras),
            discharge_year: *r.pick(&[2014, 2015]),
            los_minutes,
            died,
            eicu_status_unknown: r.chance(spec.unknown_mortality_fraction),
            height_cm: dyadic(150.0 + 40.0 * r.unit()),
            weight_kg: dyadic(50.0 + 60.0 * r.unit()),
            fahrenheit: r.chance(spec.fahrenheit_fraction),
            sparse,
            diagnoses,
            events,
            intervals,
            cultures,
        });
    }

    let mut cohort = LatentCohort { spec: spec.clone(), stays, outliers: Vec::new(), boundary: Vec::new() };
    plant_cells(&mut cohort, maps, &mut r, w_min)?;
    Ok(cohort)
}

fn r_pick_owned(r: &mut Draw, xs: &[String]) -> String {
    r.pick(xs).clone()
}

fn pad_code(r: &mut Draw, mut code: String, len: usize) -> String {
    while code.len() < len {
        code.push(char::from(b'0' + r.int(0, 9) as u8));
    }
    code
}

fn onset_minute(r: &mut Draw, schedule: &OnsetSchedule, los_minutes: i64) -> i64 {
    if schedule.hours.is_empty() {
        r.int(1, (los_minutes - 1).max(1))
    } else {
        (r.pick(&schedule.hours) * 60.0).round() as i64
    }
}

/// Whether the oracle will keep this stay through cohort selection.
fn cohort_eligible(s: &LatentStay, criteria: &CohortCriteria) -> bool {
    let los = s.los_minutes as f64 / 60.0;
    f64::from(s.age) > criteria.age_min
        && criteria.age_max.is_none_or(|m| f64::from(s.age) <= m)
        && los > criteria.los_min_hours
        && los < criteria.los_max_hours
        && !s.sparse
}

/// Place planted outliers and bound-valued cells, each alone in its
/// (stay, bin, variable) cell.
fn plant_cells(cohort: &mut LatentCohort, maps: &ConceptMaps, r: &mut Draw, w_min: i64) -> Result<()> {
    let spec = cohort.spec.clone();
    let eligible: Vec<usize> = (0..cohort.stays.len()).filter(|&i| cohort_eligible(&cohort.stays[i], &spec.criteria)).collect();
    let vitals = maps.vitals();
    let mut used = std::collections::BTreeSet::new();
    let mut plant = |cohort: &mut LatentCohort, var: usize, value: f64, r: &mut Draw| -> Result<PlantedCell> {
        for _ in 0..10_000 {
            if eligible.is_empty() {
                break;
            }
            let i = *r.pick(&eligible);
            let s = &mut cohort.stays[i];
            let n_bins = (s.los_minutes + w_min - 1) / w_min;
            let bin = r.int(0, n_bins - 1);
            if !used.insert((i, bin, var)) {
                continue;
            }
            let (from, to) = (bin * w_min, ((bin + 1) * w_min).min(s.los_minutes));
            s.events.retain(|e| !(e.var == var && e.minute >= from && e.minute < to));
            let minute = r.int(from, to - 1);
            s.events.push(LatentEvent { var, minute, value });
            return Ok(PlantedCell { stay_id: s.stay_id, bin: bin as usize, variable: vitals[var].id.clone(), value });
        }
        Err(Error::Config(format!("no free cell left to plant `{}`", vitals[var].id)))
    };
    for (id, &count) in &spec.outliers {
        let var = maps.variable(id).expect("validated").output_position;
        let available: usize = eligible
            .iter()
            .map(|&i| cohort.stays[i].events.iter().filter(|e| e.var == var).count())
            .sum();
        if count > available {
            return Err(Error::Config(format!("{count} planted outliers requested for `{id}` but only {available} events exist")));
        }
        let v = vitals[var];
        let value = spec
            .outlier_values
            .get(id)
            .copied()
            .unwrap_or_else(|| v.outlier_high.map_or(1e6, |h| h + (h - v.outlier_low.unwrap_or(0.0)).abs().max(1.0)));
        for _ in 0..count {
            let cell = plant(cohort, var, value, r)?;
            cohort.outliers.push(cell);
        }
    }
    // Temperature may be rendered in °F, whose round trip is not exact.
    // Boundary values go only where both sources record the variable.
    let generated: Vec<usize> = spec
        .variables
        .iter()
        .filter(|id| !matches!(id.as_str(), PEEP_VARIABLE | "temperature"))
        .filter_map(|id| maps.variable(id))
        .filter(|v| !v.absent_in(Source::EicuLike) && !v.absent_in(Source::MimicLike))
        .map(|v| v.output_position)
        .collect();
    for k in 0..spec.boundary_plants {
        if generated.is_empty() {
            break;
        }
        let var = *r.pick(&generated);
        let v = vitals[var];
        let bound = if k % 2 == 0 { v.outlier_high } else { v.outlier_low };
        if let Some(value) = bound {
            let cell = plant(cohort, var, value, r)?;
            cohort.boundary.push(cell);
        }
    }
    for s in &mut cohort.stays {
        s.events.sort_by_key(|e| (e.minute, e.var));
    }
    Ok(())
}

/// Generate a bundle for one schema family under `dir` and return its
/// expectations.
pub fn generate_source_bundle(spec: &PlantSpec, source: Source, dir: &Path, maps: &ConceptMaps) -> Result<OracleExpectations> {
    let latent = generate_latent(spec, maps)?;
    render_bundle(&latent, source, dir, maps)?;
    Ok(expectations(&latent, source, maps))
}

/// Write `latent` in the layout of `source` exports.
pub fn render_bundle(latent: &LatentCohort, source: Source, dir: &Path, maps: &ConceptMaps) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match source {
        Source::MimicLike => render::mimic(latent, dir, maps),
        Source::EicuLike => render::eicu(latent, dir, maps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_and_validation() {
        let maps = ConceptMaps::default_maps();
        let spec = PlantSpec { n_stays: 20, ..Default::default() };
        assert_eq!(generate_latent(&spec, &maps).unwrap(), generate_latent(&spec, &maps).unwrap());
        let bad = PlantSpec { mortality_rate: 1.5, ..spec.clone() };
        assert!(generate_latent(&bad, &maps).is_err());
        let greedy = PlantSpec { n_stays: 3, outliers: [("heart_rate".to_string(), 100_000)].into(), ..spec };
        assert!(generate_latent(&greedy, &maps).is_err());
    }

    #[test]
    fn plants_are_alone_in_their_cells() {
        let maps = ConceptMaps::default_maps();
        let latent = generate_latent(&PlantSpec { n_stays: 40, ..Default::default() }, &maps).unwrap();
        assert_eq!(latent.outliers.len(), 5);
        let hr = maps.variable("heart_rate").unwrap().output_position;
        for p in &latent.outliers {
            assert_eq!(p.value, 780.0);
            let s = latent.stays.iter().find(|s| s.stay_id == p.stay_id).unwrap();
            let b = p.bin as i64;
            let in_cell: Vec<_> = s.events.iter().filter(|e| e.var == hr && e.minute >= b * 60 && e.minute < (b + 1) * 60).collect();
            assert_eq!(in_cell.len(), 1);
        }
    }

    #[test]
    fn boundary_plants_use_variables_both_sources_record() {
        let maps = ConceptMaps::default_maps();
        let spec = PlantSpec { n_stays: 60, boundary_plants: 20, ..Default::default() };
        let latent = generate_latent(&spec, &maps).unwrap();
        assert_eq!(latent.boundary.len(), 20);
        for p in &latent.boundary {
            let v = maps.variable(&p.variable).unwrap();
            assert!(!v.absent_in(Source::EicuLike), "{} planted", p.variable);
        }
        let e = expectations(&latent, Source::EicuLike, &maps);
        assert_eq!(e.boundary.len(), 20);
    }

    #[test]
    fn values_are_dyadic_and_in_range() {
        let maps = ConceptMaps::default_maps();
        let latent = generate_latent(&PlantSpec { n_stays: 10, outliers: BTreeMap::new(), boundary_plants: 0, ..Default::default() }, &maps).unwrap();
        let vitals = maps.vitals();
        for s in &latent.stays {
            for e in &s.events {
                assert_eq!((e.value * 16.0).fract(), 0.0);
                let v = vitals[e.var];
                assert!(e.value >= v.outlier_low.unwrap() && e.value <= v.outlier_high.unwrap(), "{} {}", v.id, e.value);
            }
        }
    }
}
