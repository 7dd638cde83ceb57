//! Expected extraction outputs for a latent cohort.
//!
//! Everything here works on integer minutes and plain loops over the latent
//! records. It deliberately shares no code with the extraction stages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EthnicityKind, LatentCohort, LatentInterval, LatentStay, UnitKind};
use crate::concepts::ConceptMaps;
use crate::ingest::Source;

pub const ORACLE_FORMAT: &str = "ehrbridge-oracle";
pub const ORACLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCell {
    pub stay_id: i64,
    pub bin: usize,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCell {
    pub bin: usize,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedStay {
    pub stay_id: i64,
    pub los_hours: f64,
    pub n_bins: usize,
    /// In static column order.
    pub statics: Vec<Option<f64>>,
    /// Recorded cells after outlier removal, before any variable drop.
    pub cells: Vec<ExpectedCell>,
    /// Active (bin, intervention) pairs.
    pub interventions: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedTask {
    pub task: String,
    pub members: Vec<(i64, bool)>,
    pub excluded: Vec<(i64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleExpectations {
    pub format: String,
    pub version: u32,
    pub source: Source,
    pub window_hours: u32,
    pub vital_columns: Vec<String>,
    pub static_columns: Vec<String>,
    pub intervention_columns: Vec<String>,
    /// Stays that survive cohort selection and the missingness filter.
    pub included: Vec<i64>,
    /// Age and LOS exclusions.
    pub excluded: Vec<(i64, String)>,
    pub missingness_removed: Vec<i64>,
    /// Variables this source alone would drop.
    pub dropped_variables: Vec<String>,
    pub stays: Vec<ExpectedStay>,
    pub outliers: Vec<PlantedCell>,
    pub boundary: Vec<PlantedCell>,
    pub tasks: Vec<ExpectedTask>,
}

/// Temperature value as written to a °F export.
pub(crate) fn to_fahrenheit(c: f64) -> f64 {
    c * 9.0 / 5.0 + 32.0
}

/// Canonical value the extractor should see for one latent event.
fn observed_value(stay: &LatentStay, var_id: &str, value: f64, source: Source) -> f64 {
    if source == Source::MimicLike && stay.fahrenheit && var_id == "temperature" {
        (to_fahrenheit(value) - 32.0) * 5.0 / 9.0
    } else {
        value
    }
}

/// Interval clipped to `[0, los]` in minutes, or `None` when it is dropped.
fn clip(iv: &LatentInterval, los: i64) -> Option<(i64, i64)> {
    let start = iv.start?;
    let end = iv.end.unwrap_or(los);
    if end < start || start >= los || end < 0 {
        return None;
    }
    Some((start.max(0), end.min(los)))
}

fn statics(stay: &LatentStay, source: Source, columns: &[String], maps: &ConceptMaps) -> Vec<Option<f64>> {
    let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
    let eth = match stay.ethnicity {
        EthnicityKind::AmericanIndian => "eth_american_indian_alaska_native",
        EthnicityKind::Asian => "eth_asian",
        EthnicityKind::Hispanic => "eth_hispanic",
        EthnicityKind::Black => "eth_black_african_american",
        EthnicityKind::Other => "eth_other_unknown",
        EthnicityKind::White => "eth_white",
    };
    let unit = match stay.unit {
        UnitKind::Medical => "unit_medical",
        UnitKind::Surgical => "unit_surgical",
        UnitKind::Cardiac => "unit_cardiac",
        UnitKind::Neuro => "unit_neuro",
        UnitKind::Other => "unit_other",
    };
    let age = if source == Source::EicuLike && stay.age > 89 { 90.0 } else { f64::from(stay.age) };
    let era = match source {
        Source::MimicLike => stay.era.0,
        Source::EicuLike => stay.discharge_year,
    };
    let has = |name: &str| {
        let Some(def) = maps.comorbidities().iter().find(|d| d.name == name) else {
            return false;
        };
        stay.diagnoses.iter().any(|d| {
            def.icd9.iter().any(|p| d.icd9.starts_with(p.as_str()))
                || d.icd10.as_ref().is_some_and(|c| def.icd10.iter().any(|p| c.starts_with(p.as_str())))
        })
    };
    columns
        .iter()
        .map(|id| match id.as_str() {
            "age" => Some(age),
            "gender_male" => flag(stay.male),
            "gender_female" => flag(!stay.male),
            "admission_era_year" => Some(f64::from(era)),
            "height_cm" => Some(stay.height_cm),
            "weight_kg" => Some(stay.weight_kg),
            "bmi" => Some(stay.weight_kg / (stay.height_cm / 100.0).powi(2)),
            id if id.starts_with("eth_") => flag(id == eth),
            id if id.starts_with("unit_") => flag(id == unit),
            id => flag(has(id)),
        })
        .collect()
}

/// Observation hours of each task, in output order.
const TASKS: &[(&str, u32, Option<&str>)] = &[
    ("mortality48", 48, None),
    ("arf4", 4, Some("arf")),
    ("arf12", 12, Some("arf")),
    ("shock4", 4, Some("shock")),
    ("shock12", 12, Some("shock")),
];

pub fn expectations(latent: &LatentCohort, source: Source, maps: &ConceptMaps) -> OracleExpectations {
    let spec = &latent.spec;
    let criteria = &spec.criteria;
    let w = i64::from(criteria.window_hours) * 60;
    let vitals = maps.vitals();
    let interventions = maps.interventions();
    let vital_columns: Vec<String> = vitals.iter().map(|v| v.id.clone()).collect();
    let static_columns: Vec<String> = maps.statics().iter().map(|v| v.id.clone()).collect();
    let intervention_columns: Vec<String> = interventions.iter().map(|v| v.id.clone()).collect();
    let present: Vec<bool> = vitals.iter().map(|v| !v.absent_in(source)).collect();

    let mut excluded = Vec::new();
    let mut candidates = Vec::new();
    let mut order: Vec<&LatentStay> = latent.stays.iter().collect();
    order.sort_by_key(|s| s.stay_id);
    for s in order {
        let age = if source == Source::EicuLike && s.age > 89 { 90.0 } else { f64::from(s.age) };
        let los_h = s.los_minutes as f64 / 60.0;
        if !(age > criteria.age_min) || criteria.age_max.is_some_and(|m| age > m) {
            excluded.push((s.stay_id, "AgeOut".to_string()));
        } else if !(los_h > criteria.los_min_hours && los_h < criteria.los_max_hours) {
            excluded.push((s.stay_id, "LosOut".to_string()));
        } else {
            candidates.push(s);
        }
    }

    // (bin, var) -> (sum, count), per candidate
    let mut grids: Vec<(usize, BTreeMap<(usize, usize), (f64, u32)>)> = Vec::new();
    for s in &candidates {
        let n_bins = ((s.los_minutes + w - 1) / w).max(1) as usize;
        let mut cells: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
        for e in &s.events {
            if !present[e.var] || e.minute < 0 || e.minute >= s.los_minutes {
                continue;
            }
            let bin = (e.minute / w) as usize;
            let c = cells.entry((bin, e.var)).or_insert((0.0, 0));
            c.0 += observed_value(s, &vitals[e.var].id, e.value, source);
            c.1 += 1;
        }
        let kept = cells
            .into_iter()
            .filter(|&((_, var), (sum, n))| {
                let mean = sum / f64::from(n);
                let v = vitals[var];
                v.outlier_low.is_none_or(|lo| mean >= lo) && v.outlier_high.is_none_or(|hi| mean <= hi)
            })
            .collect();
        grids.push((n_bins, kept));
    }

    let live = present.iter().filter(|&&p| p).count();
    let mut missingness_removed = Vec::new();
    let mut var_nulls = vec![0u64; vitals.len()];
    let mut total_bins = 0u64;
    for (s, (n_bins, cells)) in candidates.iter().zip(&grids) {
        let recorded = cells.len();
        let total = live * n_bins;
        let ratio = if total == 0 { 1.0 } else { (total - recorded) as f64 / total as f64 };
        if ratio > criteria.missingness_threshold {
            missingness_removed.push(s.stay_id);
        }
        total_bins += *n_bins as u64;
        for (j, nulls) in var_nulls.iter_mut().enumerate() {
            let filled = cells.keys().filter(|&&(_, v)| v == j).count();
            *nulls += (*n_bins - filled) as u64;
        }
    }
    let dropped_variables: Vec<String> = (0..vitals.len())
        .filter(|&j| present[j])
        .filter(|&j| {
            let ratio = if total_bins == 0 { 1.0 } else { var_nulls[j] as f64 / total_bins as f64 };
            ratio > criteria.missingness_threshold
        })
        .map(|j| vitals[j].id.clone())
        .collect();

    let mut stays = Vec::new();
    let mut included = Vec::new();
    for (s, (n_bins, cells)) in candidates.iter().zip(grids) {
        if missingness_removed.contains(&s.stay_id) {
            continue;
        }
        included.push(s.stay_id);
        let mut active = BTreeSet::new();
        for iv in &s.intervals {
            if let Some((a, b)) = clip(iv, s.los_minutes) {
                for t in 0..n_bins {
                    let (lo, hi) = (t as i64 * w, (t as i64 + 1) * w);
                    if a < hi && b >= lo {
                        active.insert((t, iv.var));
                    }
                }
            }
        }
        stays.push(ExpectedStay {
            stay_id: s.stay_id,
            los_hours: s.los_minutes as f64 / 60.0,
            n_bins,
            statics: statics(s, source, &static_columns, maps),
            cells: cells
                .into_iter()
                .map(|((bin, var), (sum, n))| ExpectedCell { bin, variable: vitals[var].id.clone(), value: sum / f64::from(n) })
                .collect(),
            interventions: active.into_iter().map(|(t, v)| (t, interventions[v].id.clone())).collect(),
        });
    }

    let iv_ids = |names: &[&str]| -> Vec<usize> {
        interventions.iter().filter(|v| names.contains(&v.id.as_str())).map(|v| v.output_position).collect()
    };
    let vent = iv_ids(&["ventilation"]);
    let vaso = iv_ids(&["norepinephrine", "epinephrine", "dopamine", "vasopressin", "phenylephrine"]);
    let peep = vitals.iter().position(|v| v.id == "peep");
    let mut tasks = Vec::new();
    for &(name, obs, condition) in TASKS {
        if f64::from(obs) >= criteria.los_max_hours {
            continue;
        }
        let mut task = ExpectedTask { task: name.to_string(), members: Vec::new(), excluded: Vec::new() };
        for s in candidates.iter().filter(|s| included.contains(&s.stay_id)) {
            let obs_min = i64::from(obs) * 60;
            if s.los_minutes < obs_min {
                task.excluded.push((s.stay_id, "LosTooShort".into()));
                continue;
            }
            let Some(condition) = condition else {
                let unknown = source == Source::EicuLike && s.eicu_status_unknown;
                if unknown {
                    task.excluded.push((s.stay_id, "OutcomeUnknown".into()));
                } else {
                    task.members.push((s.stay_id, s.died));
                }
                continue;
            };
            let vars = if condition == "arf" { &vent } else { &vaso };
            let mut onset: Option<i64> = None;
            let mut consider = |m: i64| onset = Some(onset.map_or(m, |o| o.min(m)));
            for iv in s.intervals.iter().filter(|iv| vars.contains(&iv.var)) {
                if let Some((a, _)) = clip(iv, s.los_minutes) {
                    consider(a);
                }
            }
            if condition == "arf" {
                for e in s.events.iter().filter(|e| Some(e.var) == peep) {
                    if e.value > 0.0 && e.minute >= 0 && e.minute < s.los_minutes {
                        consider(e.minute);
                    }
                }
            }
            let limit = (i64::from(obs) + i64::from(criteria.gap_hours)) * 60;
            match onset {
                Some(t) if t <= 0 => task.excluded.push((s.stay_id, "PreexistingAtAdmission".into())),
                Some(t) if t <= limit => task.excluded.push((s.stay_id, "OnsetInsideWindowOrGap".into())),
                Some(_) => task.members.push((s.stay_id, true)),
                None => task.members.push((s.stay_id, false)),
            }
        }
        tasks.push(task);
    }

    let recorded_here = |id: &str| maps.variable(id).is_some_and(|v| !v.absent_in(source));
    OracleExpectations {
        format: ORACLE_FORMAT.to_string(),
        version: ORACLE_VERSION,
        source,
        window_hours: criteria.window_hours,
        vital_columns,
        static_columns,
        intervention_columns,
        included,
        excluded,
        missingness_removed,
        dropped_variables,
        stays,
        outliers: latent.outliers.iter().filter(|p| recorded_here(&p.variable)).cloned().collect(),
        boundary: latent.boundary.iter().filter(|p| recorded_here(&p.variable)).cloned().collect(),
        tasks,
    }
}
