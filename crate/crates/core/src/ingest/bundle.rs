//! Assemble a source bundle directory into per-stay records: stays and
//! demographics from the record tables, mapped events from the event tables.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Datelike, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::table::{read_records, resolve_table_path, schemas_for, Layout, ParseStats, RecordTable};
use super::{
    normalize_icd, parse_offset, parse_source_table, parse_timestamp, to_relative_hours, IcdVersion,
    RowOwner, Source, SourceEventRow, SourceTime, StayKey,
};
use crate::cohort::Mortality;
use crate::concepts::{fold_key, map_culture_site, map_item_to_variable, ConceptMaps, UnmappedKeys, VariableKind};
use crate::error::{Error, Result};

/// ICU admission and discharge in the source's native encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StayTimes {
    Absolute {
        intime: NaiveDateTime,
        outtime: Option<NaiveDateTime>,
    },
    Offset {
        discharge_offset: Option<i64>,
    },
}

impl StayTimes {
    pub fn anchor(&self) -> Option<NaiveDateTime> {
        match self {
            StayTimes::Absolute { intime, .. } => Some(*intime),
            StayTimes::Offset { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Demographics {
    pub age: Option<f64>,
    pub gender: Option<String>,
    pub ethnicity: Option<String>,
    pub unit_type: Option<String>,
    /// MIMIC-like anchor year group, e.g. "2008 - 2010".
    pub anchor_year_group: Option<String>,
    /// eICU-like hospital discharge year.
    pub discharge_year: Option<i32>,
    pub hospital_mortality: Mortality,
    pub icu_mortality: Mortality,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
    /// False when the demographic source row was missing.
    pub present: bool,
}

/// A mapped numeric measurement in canonical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitalEvent {
    /// Index into the registry's numeric vitals (output-position order).
    pub var: usize,
    pub hour: f64,
    pub value: f64,
}

/// An intervention record before clipping to the stay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawInterval {
    /// Index into the registry's interventions (output-position order).
    pub var: usize,
    pub start_h: Option<f64>,
    pub end_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CultureEvent {
    pub hour: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StayRecord {
    pub key: StayKey,
    pub times: Option<StayTimes>,
    pub demographics: Demographics,
    /// Normalized codes.
    pub diagnoses: Vec<(String, IcdVersion)>,
    pub vitals: Vec<VitalEvent>,
    pub intervals: Vec<RawInterval>,
    pub cultures: Vec<CultureEvent>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub tables: BTreeMap<String, ParseStats>,
    pub unmapped: UnmappedKeys,
    pub orphan_rows: u64,
    pub duplicate_stays: u64,
    pub text_values: u64,
    pub unit_converted: u64,
    pub unit_unrecognized: u64,
    pub bad_diagnoses: u64,
}

impl IngestCounters {
    fn absorb(&mut self, other: IngestCounters) {
        self.tables.extend(other.tables);
        self.unmapped.merge(other.unmapped);
        self.orphan_rows += other.orphan_rows;
        self.duplicate_stays += other.duplicate_stays;
        self.text_values += other.text_values;
        self.unit_converted += other.unit_converted;
        self.unit_unrecognized += other.unit_unrecognized;
        self.bad_diagnoses += other.bad_diagnoses;
    }
}

/// All stays of one source, sorted ascending by ICU stay id.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub source: Source,
    pub stays: Vec<StayRecord>,
    pub counters: IngestCounters,
}

fn table_path(dir: &Path, table: &str) -> Result<std::path::PathBuf> {
    resolve_table_path(dir, table).ok_or_else(|| {
        Error::io(
            dir.join(format!("{table}.csv")),
            std::io::Error::new(std::io::ErrorKind::NotFound, "table file not found"),
        )
    })
}

fn load_records(dir: &Path, table: &str, counters: &mut IngestCounters) -> Result<RecordTable> {
    let t = read_records(&table_path(dir, table)?, table)?;
    counters.tables.insert(table.to_string(), t.stats.clone());
    Ok(t)
}

fn num<T: std::str::FromStr>(s: Option<&str>) -> Option<T> {
    s.and_then(|s| s.parse().ok())
}

fn parse_mortality(s: Option<&str>) -> Mortality {
    match s.map(|s| s.to_ascii_lowercase()) {
        Some(s) if s == "1" || s == "expired" => Mortality::Yes,
        Some(s) if s == "0" || s == "alive" => Mortality::No,
        _ => Mortality::Unknown,
    }
}

/// Parse an age cell; the ">89"-style obfuscated form reads as 90.
fn parse_age(s: Option<&str>) -> Option<f64> {
    let s = s?.trim();
    if let Some(rest) = s.strip_prefix('>') {
        return rest.trim().parse::<f64>().ok().map(|v| v + 1.0);
    }
    s.parse().ok()
}

struct StayIndex {
    by_stay: HashMap<i64, usize>,
    by_admission: HashMap<i64, Vec<usize>>,
}

impl StayIndex {
    fn new(stays: &[StayRecord]) -> Self {
        let mut by_admission: HashMap<i64, Vec<usize>> = HashMap::new();
        for (i, s) in stays.iter().enumerate() {
            if let Some(h) = s.key.hadm_id {
                by_admission.entry(h).or_default().push(i);
            }
        }
        StayIndex {
            by_stay: stays.iter().enumerate().map(|(i, s)| (s.key.icu_stay_id, i)).collect(),
            by_admission,
        }
    }

    fn resolve(&self, owner: RowOwner) -> &[usize] {
        match owner {
            RowOwner::Stay(id) => self.by_stay.get(&id).map(std::slice::from_ref).unwrap_or(&[]),
            RowOwner::Admission(h) => self.by_admission.get(&h).map(Vec::as_slice).unwrap_or(&[]),
        }
    }
}

fn mimic_stays(dir: &Path, counters: &mut IngestCounters) -> Result<Vec<StayRecord>> {
    let icu = load_records(dir, "icustays", counters)?;
    let pats = load_records(dir, "patients", counters)?;
    let adms = load_records(dir, "admissions", counters)?;
    let diags = load_records(dir, "diagnoses_icd", counters)?;

    let patients: HashMap<i64, &csv::StringRecord> = pats
        .rows
        .iter()
        .filter_map(|r| Some((num(pats.get(r, "subject_id"))?, r)))
        .collect();
    let admissions: HashMap<i64, &csv::StringRecord> = adms
        .rows
        .iter()
        .filter_map(|r| Some((num(adms.get(r, "hadm_id"))?, r)))
        .collect();

    let mut stays = Vec::with_capacity(icu.rows.len());
    let mut seen = std::collections::HashSet::new();
    for r in &icu.rows {
        let (Some(subject), Some(hadm), Some(stay)) = (
            num::<i64>(icu.get(r, "subject_id")),
            num::<i64>(icu.get(r, "hadm_id")),
            num::<i64>(icu.get(r, "stay_id")),
        ) else {
            log::warn!("icustays: row with unparseable identifiers skipped");
            counters.orphan_rows += 1;
            continue;
        };
        let Some(intime) = icu.get(r, "intime").and_then(parse_timestamp) else {
            log::warn!("icustays: stay {stay} has no parseable intime; skipped");
            counters.orphan_rows += 1;
            continue;
        };
        if !seen.insert(stay) {
            counters.duplicate_stays += 1;
            log::warn!("icustays: duplicate stay_id {stay}; keeping the first row");
            continue;
        }
        let outtime = icu.get(r, "outtime").and_then(parse_timestamp);

        let mut demo = Demographics {
            unit_type: icu.get(r, "first_careunit").map(str::to_string),
            present: true,
            ..Default::default()
        };
        match patients.get(&subject) {
            Some(p) => {
                let anchor_age: Option<f64> = num(pats.get(p, "anchor_age"));
                let anchor_year: Option<i32> = num(pats.get(p, "anchor_year"));
                demo.age = match (anchor_age, anchor_year) {
                    (Some(a), Some(y)) => Some(a + f64::from(intime.year() - y)),
                    (a, _) => a,
                };
                demo.gender = pats.get(p, "gender").map(str::to_string);
                demo.anchor_year_group = pats.get(p, "anchor_year_group").map(str::to_string);
            }
            None => {
                demo.present = false;
                log::warn!("patients: no row for subject {subject} (stay {stay})");
            }
        }
        match admissions.get(&hadm) {
            Some(a) => {
                demo.ethnicity = adms.get(a, "race").map(str::to_string);
                demo.hospital_mortality = parse_mortality(adms.get(a, "hospital_expire_flag"));
                let death = adms.get(a, "deathtime").and_then(parse_timestamp);
                demo.icu_mortality = match (death, outtime) {
                    (Some(d), Some(out)) if d <= out => Mortality::Yes,
                    (Some(_), None) => Mortality::Unknown,
                    _ => Mortality::No,
                };
            }
            None => {
                demo.present = false;
                log::warn!("admissions: no row for hadm {hadm} (stay {stay})");
            }
        }
        stays.push(StayRecord {
            key: StayKey::mimic(subject, hadm, stay),
            times: Some(StayTimes::Absolute { intime, outtime }),
            demographics: demo,
            diagnoses: Vec::new(),
            vitals: Vec::new(),
            intervals: Vec::new(),
            cultures: Vec::new(),
        });
    }
    stays.sort_by_key(|s| s.key.icu_stay_id);

    let index = StayIndex::new(&stays);
    for r in &diags.rows {
        let (Some(hadm), Some(code), Some(version)) = (
            num::<i64>(diags.get(r, "hadm_id")),
            diags.get(r, "icd_code"),
            diags.get(r, "icd_version").and_then(IcdVersion::from_number),
        ) else {
            counters.bad_diagnoses += 1;
            continue;
        };
        let Ok(code) = normalize_icd(code, version) else {
            counters.bad_diagnoses += 1;
            continue;
        };
        for &i in index.resolve(RowOwner::Admission(hadm)) {
            stays[i].diagnoses.push((code.clone(), version));
        }
    }
    Ok(stays)
}

fn eicu_stays(dir: &Path, counters: &mut IngestCounters) -> Result<Vec<StayRecord>> {
    let pat = load_records(dir, "patient", counters)?;
    let diags = load_records(dir, "diagnosis", counters)?;

    let mut stays = Vec::with_capacity(pat.rows.len());
    let mut seen = std::collections::HashSet::new();
    for r in &pat.rows {
        let Some(stay) = num::<i64>(pat.get(r, "patientunitstayid")) else {
            counters.orphan_rows += 1;
            continue;
        };
        if !seen.insert(stay) {
            counters.duplicate_stays += 1;
            log::warn!("patient: duplicate patientunitstayid {stay}; keeping the first row");
            continue;
        }
        let mut key = StayKey::eicu(stay);
        key.hadm_id = num(pat.get(r, "patienthealthsystemstayid"));
        let demo = Demographics {
            age: parse_age(pat.get(r, "age")),
            gender: pat.get(r, "gender").map(str::to_string),
            ethnicity: pat.get(r, "ethnicity").map(str::to_string),
            unit_type: pat.get(r, "unittype").map(str::to_string),
            anchor_year_group: None,
            discharge_year: num(pat.get(r, "hospitaldischargeyear")),
            hospital_mortality: parse_mortality(pat.get(r, "hospitaldischargestatus")),
            icu_mortality: parse_mortality(pat.get(r, "unitdischargestatus")),
            height_cm: num(pat.get(r, "admissionheight")),
            weight_kg: num(pat.get(r, "admissionweight")),
            present: true,
        };
        stays.push(StayRecord {
            key,
            times: Some(StayTimes::Offset {
                discharge_offset: pat.get(r, "unitdischargeoffset").and_then(parse_offset),
            }),
            demographics: demo,
            diagnoses: Vec::new(),
            vitals: Vec::new(),
            intervals: Vec::new(),
            cultures: Vec::new(),
        });
    }
    stays.sort_by_key(|s| s.key.icu_stay_id);

    let index = StayIndex::new(&stays);
    for r in &diags.rows {
        let (Some(stay), Some(cell)) = (num::<i64>(diags.get(r, "patientunitstayid")), diags.get(r, "icd9code"))
        else {
            counters.bad_diagnoses += 1;
            continue;
        };
        // "428.0, I50.9": the first code is ICD-9, any following ones ICD-10.
        for (k, token) in cell.split(',').enumerate() {
            let version = if k == 0 { IcdVersion::Icd9 } else { IcdVersion::Icd10 };
            match normalize_icd(token, version) {
                Ok(code) => {
                    for &i in index.resolve(RowOwner::Stay(stay)) {
                        stays[i].diagnoses.push((code.clone(), version));
                    }
                }
                Err(_) => counters.bad_diagnoses += 1,
            }
        }
    }
    Ok(stays)
}

enum Payload {
    Vital(VitalEvent),
    Interval(RawInterval),
    Culture(CultureEvent),
    Height(f64, f64),
    Weight(f64, f64),
}

fn rel(t: Option<SourceTime>, anchor: Option<NaiveDateTime>) -> Option<f64> {
    t.and_then(|t| to_relative_hours(t, anchor).ok())
}

fn dispatch_table(
    dir: &Path,
    table: &'static str,
    is_culture: bool,
    stays: &[StayRecord],
    index: &StayIndex,
    maps: &ConceptMaps,
) -> Result<(Vec<(usize, Payload)>, IngestCounters)> {
    let vital_pos: HashMap<&str, usize> = maps.vitals().iter().map(|v| (v.id.as_str(), v.output_position)).collect();
    let iv_pos: HashMap<&str, usize> =
        maps.interventions().iter().map(|v| (v.id.as_str(), v.output_position)).collect();
    let mut counters = IngestCounters::default();
    let mut out = Vec::new();
    let mut stream = parse_source_table(&table_path(dir, table)?, table)?;
    let source = stream.source();
    for row in stream.by_ref() {
        let targets = index.resolve(row.owner);
        if targets.is_empty() {
            counters.orphan_rows += 1;
            continue;
        }
        let SourceEventRow {
            raw_key,
            event_time,
            end_time,
            value,
            unit,
            ..
        } = row;
        if is_culture {
            let category = map_culture_site(&raw_key, maps).to_string();
            for &i in targets {
                if let Some(hour) = rel(event_time, stays[i].times.and_then(|t| t.anchor())) {
                    out.push((
                        i,
                        Payload::Culture(CultureEvent {
                            hour,
                            category: category.clone(),
                        }),
                    ));
                }
            }
            continue;
        }
        let Some(var) = map_item_to_variable(source, &raw_key, maps, &mut counters.unmapped) else {
            continue;
        };
        let value = match (value, var.kind) {
            (_, VariableKind::Intervention) => None,
            (Some(v), _) => {
                let converted = unit.as_deref().and_then(|u| {
                    let c = maps.convert_unit(var, u, v);
                    if c.is_none() && fold_key(u) != fold_key(&var.canonical_unit) {
                        counters.unit_unrecognized += 1;
                    }
                    c
                });
                if converted.is_some() {
                    counters.unit_converted += 1;
                }
                Some(converted.unwrap_or(v))
            }
            (None, _) => {
                counters.text_values += 1;
                continue;
            }
        };
        for &i in targets {
            let anchor = stays[i].times.and_then(|t| t.anchor());
            let payload = match var.kind {
                VariableKind::NumericVital => {
                    let Some(hour) = rel(event_time, anchor) else { continue };
                    Payload::Vital(VitalEvent {
                        var: vital_pos[var.id.as_str()],
                        hour,
                        value: value.unwrap_or_default(),
                    })
                }
                VariableKind::Intervention => Payload::Interval(RawInterval {
                    var: iv_pos[var.id.as_str()],
                    start_h: rel(event_time, anchor),
                    end_h: rel(end_time, anchor),
                }),
                VariableKind::Static => {
                    let Some(hour) = rel(event_time, anchor) else { continue };
                    let v = value.unwrap_or_default();
                    match var.id.as_str() {
                        "height_cm" => Payload::Height(hour, v),
                        "weight_kg" => Payload::Weight(hour, v),
                        _ => continue,
                    }
                }
                VariableKind::CultureCategorical => continue,
            };
            out.push((i, payload));
        }
    }
    counters.tables.insert(table.to_string(), stream.stats().clone());
    Ok((out, counters))
}

/// Load every table of a bundle directory. Event tables are parsed
/// concurrently on the current rayon pool and merged in a fixed table order.
pub fn load_bundle(dir: &Path, source: Source, maps: &ConceptMaps) -> Result<Bundle> {
    let mut counters = IngestCounters::default();
    let mut stays = match source {
        Source::MimicLike => mimic_stays(dir, &mut counters)?,
        Source::EicuLike => eicu_stays(dir, &mut counters)?,
    };
    let index = StayIndex::new(&stays);
    let tables: Vec<(&'static str, bool)> = schemas_for(source)
        .filter(|s| !matches!(s.layout, Layout::Records))
        .map(|s| (s.name, matches!(s.name, "microbiologyevents" | "microlab")))
        .collect();
    let parsed: Vec<Result<(Vec<(usize, Payload)>, IngestCounters)>> = tables
        .par_iter()
        .map(|&(t, culture)| dispatch_table(dir, t, culture, &stays, &index, maps))
        .collect();

    let mut first_height: Vec<Option<(f64, f64)>> = vec![None; stays.len()];
    let mut first_weight: Vec<Option<(f64, f64)>> = vec![None; stays.len()];
    let earlier = |slot: &mut Option<(f64, f64)>, hour: f64, v: f64| {
        if slot.is_none_or(|(h, _)| hour < h) {
            *slot = Some((hour, v));
        }
    };
    for result in parsed {
        let (payloads, c) = result?;
        counters.absorb(c);
        for (i, p) in payloads {
            let s = &mut stays[i];
            match p {
                Payload::Vital(v) => s.vitals.push(v),
                Payload::Interval(iv) => s.intervals.push(iv),
                Payload::Culture(c) => s.cultures.push(c),
                Payload::Height(h, v) => earlier(&mut first_height[i], h, v),
                Payload::Weight(h, v) => earlier(&mut first_weight[i], h, v),
            }
        }
    }
    if source == Source::MimicLike {
        for (i, s) in stays.iter_mut().enumerate() {
            s.demographics.height_cm = first_height[i].map(|(_, v)| v);
            s.demographics.weight_kg = first_weight[i].map(|(_, v)| v);
        }
    }
    Ok(Bundle { source, stays, counters })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_parsing() {
        assert_eq!(parse_age(Some("> 89")), Some(90.0));
        assert_eq!(parse_age(Some("45")), Some(45.0));
        assert_eq!(parse_age(Some("")), None);
        assert_eq!(parse_age(None), None);
    }

    #[test]
    fn mortality_parsing() {
        assert_eq!(parse_mortality(Some("1")), Mortality::Yes);
        assert_eq!(parse_mortality(Some("Alive")), Mortality::No);
        assert_eq!(parse_mortality(Some("Expired")), Mortality::Yes);
        assert_eq!(parse_mortality(None), Mortality::Unknown);
    }
}
