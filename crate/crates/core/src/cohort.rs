//! Cohort selection and the Static table.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptMaps, DERIVED_STATIC_IDS};
use crate::error::{Error, Result};
use crate::ingest::{StayKey, StayRecord, StayTimes};
use crate::interventions::{resolve_intervals, ARF_INTERVENTIONS, PEEP_VARIABLE, VASOPRESSORS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mortality {
    No,
    Yes,
    #[default]
    Unknown,
}

impl Mortality {
    pub fn as_str(self) -> &'static str {
        match self {
            Mortality::No => "No",
            Mortality::Yes => "Yes",
            Mortality::Unknown => "Unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Generic,
    Sepsis3,
    Arf,
    Shock,
    Copd,
    Chf,
    CustomId,
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "generic" => Condition::Generic,
            "sepsis_3" | "sepsis3" => Condition::Sepsis3,
            "arf" => Condition::Arf,
            "shock" => Condition::Shock,
            "copd" => Condition::Copd,
            "chf" => Condition::Chf,
            "custom" | "customid" | "custom_id" => Condition::CustomId,
            other => return Err(Error::Config(format!("unknown cohort condition `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortCriteria {
    /// Exclusive lower age bound.
    pub age_min: f64,
    /// Inclusive upper age bound.
    pub age_max: Option<f64>,
    pub los_min_hours: f64,
    pub los_max_hours: f64,
    pub missingness_threshold: f64,
    pub condition: Condition,
    pub custom_ids: Option<Vec<i64>>,
    pub window_hours: u32,
    pub gap_hours: u32,
    pub seed: u64,
}

impl Default for CohortCriteria {
    fn default() -> Self {
        CohortCriteria {
            age_min: 18.0,
            age_max: None,
            los_min_hours: 24.0,
            los_max_hours: 240.0,
            missingness_threshold: 0.9,
            condition: Condition::Generic,
            custom_ids: None,
            window_hours: 1,
            gap_hours: 6,
            seed: 0,
        }
    }
}

impl CohortCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.los_min_hours < self.los_max_hours) {
            return Err(Error::Config(format!(
                "los_min_hours ({}) must be below los_max_hours ({})",
                self.los_min_hours, self.los_max_hours
            )));
        }
        if !(1..=24).contains(&self.window_hours) {
            return Err(Error::Config(format!(
                "window_hours must be within 1..=24, got {}",
                self.window_hours
            )));
        }
        if !(0.0..=1.0).contains(&self.missingness_threshold) {
            return Err(Error::Config(format!(
                "missingness_threshold must be within [0, 1], got {}",
                self.missingness_threshold
            )));
        }
        if self.condition == Condition::CustomId && self.custom_ids.as_ref().is_none_or(Vec::is_empty) {
            return Err(Error::Config("condition customid needs a non-empty custom id list".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    AgeOut,
    LosOut,
    MissingnessOut,
    ConditionUnmet,
    NotInCustomList,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortResult {
    pub included: Vec<StayKey>,
    pub excluded: Vec<(StayKey, ExclusionReason)>,
}

/// ICU length of stay in hours, or `None` when discharge is missing or not
/// after admission.
pub fn compute_los(times: &StayTimes) -> Option<f64> {
    let hours = match *times {
        StayTimes::Absolute { intime, outtime } => (outtime? - intime).num_seconds() as f64 / 3600.0,
        StayTimes::Offset { discharge_offset } => discharge_offset? as f64 / 60.0,
    };
    (hours > 0.0).then_some(hours)
}

pub fn stay_los(stay: &StayRecord) -> Option<f64> {
    stay.times.as_ref().and_then(compute_los)
}

/// Injected sepsis-3 predicate.
pub type Sepsis3Hook = dyn Fn(&StayRecord) -> bool + Send + Sync;

/// Whether a stay meets the cohort condition.
pub fn condition_predicate(
    stay: &StayRecord,
    los_hours: f64,
    condition: Condition,
    maps: &ConceptMaps,
    sepsis3: Option<&Sepsis3Hook>,
) -> Result<bool> {
    let intervention_ids = |ids: &[&str]| -> Result<BTreeSet<usize>> {
        ids.iter()
            .map(|id| {
                maps.variable(id)
                    .map(|v| v.output_position)
                    .ok_or_else(|| Error::Config(format!("registry lacks intervention `{id}`")))
            })
            .collect()
    };
    Ok(match condition {
        Condition::Generic | Condition::CustomId => true,
        Condition::Sepsis3 => sepsis3.ok_or(Error::NoSepsisHook)?(stay),
        Condition::Arf => {
            let vent = intervention_ids(ARF_INTERVENTIONS)?;
            let peep = maps
                .variable(PEEP_VARIABLE)
                .ok_or_else(|| Error::Config(format!("registry lacks `{PEEP_VARIABLE}`")))?
                .output_position;
            let (intervals, _) = resolve_intervals(&stay.intervals, los_hours);
            intervals.iter().any(|iv| vent.contains(&iv.var))
                || stay
                    .vitals
                    .iter()
                    .any(|e| e.var == peep && e.value > 0.0 && e.hour >= 0.0 && e.hour < los_hours)
        }
        Condition::Shock => {
            let vaso = intervention_ids(VASOPRESSORS)?;
            let (intervals, _) = resolve_intervals(&stay.intervals, los_hours);
            intervals.iter().any(|iv| vaso.contains(&iv.var))
        }
        Condition::Copd => has_code(stay, maps.copd_definition()),
        Condition::Chf => has_code(stay, maps.chf_definition()),
    })
}

fn has_code(stay: &StayRecord, def: &crate::concepts::ComorbidityDef) -> bool {
    stay.diagnoses.iter().any(|(code, v)| def.matches(code, *v))
}

fn evaluate(
    stay: &StayRecord,
    criteria: &CohortCriteria,
    custom: Option<&BTreeSet<i64>>,
    maps: &ConceptMaps,
    sepsis3: Option<&Sepsis3Hook>,
) -> Result<Option<ExclusionReason>> {
    if let Some(age) = stay.demographics.age {
        if !(age > criteria.age_min) || criteria.age_max.is_some_and(|m| age > m) {
            return Ok(Some(ExclusionReason::AgeOut));
        }
    }
    let Some(los) = stay_los(stay) else {
        return Ok(Some(ExclusionReason::LosOut));
    };
    if !(los > criteria.los_min_hours && los < criteria.los_max_hours) {
        return Ok(Some(ExclusionReason::LosOut));
    }
    if !condition_predicate(stay, los, criteria.condition, maps, sepsis3)? {
        return Ok(Some(ExclusionReason::ConditionUnmet));
    }
    if let Some(ids) = custom {
        if !ids.contains(&stay.key.icu_stay_id) {
            return Ok(Some(ExclusionReason::NotInCustomList));
        }
    }
    Ok(None)
}

/// Partition candidate stays into included and excluded. The exclusion
/// reason is the first failed check in the order age, LOS, condition, custom
/// list. Missingness exclusions are added later by the time-series stage.
pub fn select_cohort(
    criteria: &CohortCriteria,
    stays: &[StayRecord],
    maps: &ConceptMaps,
    sepsis3: Option<&Sepsis3Hook>,
) -> Result<CohortResult> {
    criteria.validate()?;
    if criteria.condition == Condition::Sepsis3 && sepsis3.is_none() {
        return Err(Error::NoSepsisHook);
    }
    let custom: Option<BTreeSet<i64>> = (criteria.condition == Condition::CustomId)
        .then(|| criteria.custom_ids.iter().flatten().copied().collect());
    let verdicts: Vec<Option<ExclusionReason>> = stays
        .par_iter()
        .map(|s| evaluate(s, criteria, custom.as_ref(), maps, sepsis3))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..stays.len()).collect();
    order.sort_by_key(|&i| stays[i].key.icu_stay_id);
    let mut result = CohortResult::default();
    for i in order {
        match verdicts[i] {
            None => result.included.push(stays[i].key.clone()),
            Some(r) => result.excluded.push((stays[i].key.clone(), r)),
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ethnicity {
    AmericanIndianAlaskaNative,
    Asian,
    Hispanic,
    BlackAfricanAmerican,
    OtherUnknown,
    White,
}

impl Ethnicity {
    pub fn from_raw(raw: Option<&str>) -> Self {
        let Some(s) = raw.map(str::to_ascii_lowercase) else {
            return Ethnicity::OtherUnknown;
        };
        if s.contains("american indian") || s.contains("native american") || s.contains("alaska") {
            Ethnicity::AmericanIndianAlaskaNative
        } else if s.contains("hispanic") || s.contains("latino") {
            Ethnicity::Hispanic
        } else if s.contains("black") || s.contains("african american") {
            Ethnicity::BlackAfricanAmerican
        } else if s.contains("white") || s.contains("caucasian") {
            // before "asian", which "caucasian" contains
            Ethnicity::White
        } else if s.contains("asian") {
            Ethnicity::Asian
        } else {
            Ethnicity::OtherUnknown
        }
    }

    pub fn feature_id(self) -> &'static str {
        match self {
            Ethnicity::AmericanIndianAlaskaNative => "eth_american_indian_alaska_native",
            Ethnicity::Asian => "eth_asian",
            Ethnicity::Hispanic => "eth_hispanic",
            Ethnicity::BlackAfricanAmerican => "eth_black_african_american",
            Ethnicity::OtherUnknown => "eth_other_unknown",
            Ethnicity::White => "eth_white",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ethnicity::AmericanIndianAlaskaNative => "American Indian/Alaska Native",
            Ethnicity::Asian => "Asian",
            Ethnicity::Hispanic => "Hispanic",
            Ethnicity::BlackAfricanAmerican => "Black/African American",
            Ethnicity::OtherUnknown => "Other/Unknown",
            Ethnicity::White => "White",
        }
    }
}

fn unit_feature(unit: Option<&str>) -> &'static str {
    let Some(u) = unit.map(str::to_ascii_lowercase) else {
        return "unit_other";
    };
    let has = |k: &str| u.contains(k);
    if has("neuro") {
        "unit_neuro"
    } else if has("cardiac") || has("coronary") || has("ccu") || has("cticu") || has("cvicu") {
        "unit_cardiac"
    } else if (has("med") && has("surg")) || has("micu/sicu") {
        "unit_other"
    } else if has("surg") || has("sicu") || has("trauma") {
        "unit_surgical"
    } else if has("medic") || has("micu") {
        "unit_medical"
    } else {
        "unit_other"
    }
}

/// Table-style era bucket for a MIMIC-like anchor year group, plus its start
/// year.
pub fn era_bucket(anchor_year_group: &str) -> Option<(String, i32)> {
    let mut years = anchor_year_group
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse::<i32>().ok());
    let start = years.next()?;
    let end = years.next().unwrap_or(start);
    Some((format!("{start}-{end}"), start))
}

/// One Static-table row. `features` follows the registry's static output
/// order; outcomes and labels travel alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayStatic {
    pub key: StayKey,
    pub age: Option<f64>,
    pub gender: String,
    pub ethnicity: Ethnicity,
    pub admission_era: String,
    pub anchor_year_group: Option<String>,
    pub los_hours: f64,
    pub hospital_mortality: Mortality,
    pub icu_mortality: Mortality,
    pub comorbidities: Vec<bool>,
    pub features: Vec<Option<f64>>,
}

pub fn extract_static(stay: &StayRecord, los_hours: f64, maps: &ConceptMaps) -> StayStatic {
    let d = &stay.demographics;
    if !d.present {
        log::warn!("stay {}: demographic source row missing; static fields Unknown", stay.key.icu_stay_id);
    }
    let gender = match d.gender.as_deref().map(str::to_ascii_lowercase).as_deref() {
        Some("m") | Some("male") => "M",
        Some("f") | Some("female") => "F",
        _ => "Unknown",
    };
    let ethnicity = Ethnicity::from_raw(d.ethnicity.as_deref());
    let (admission_era, era_year) = match (&d.anchor_year_group, d.discharge_year) {
        (Some(g), _) => match era_bucket(g) {
            Some((label, y)) => (label, Some(y)),
            None => ("Unknown".to_string(), None),
        },
        (None, Some(y)) => (y.to_string(), Some(y)),
        (None, None) => ("Unknown".to_string(), None),
    };
    let comorbidities: Vec<bool> = maps
        .comorbidities()
        .iter()
        .map(|def| has_code(stay, def))
        .collect();
    let bmi = match (d.height_cm, d.weight_kg) {
        (Some(h), Some(w)) if h > 0.0 => Some(w / (h / 100.0).powi(2)),
        _ => None,
    };
    let unit = unit_feature(d.unit_type.as_deref());
    let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
    let features = maps
        .statics()
        .iter()
        .map(|v| match v.id.as_str() {
            "age" => d.age,
            "gender_male" => flag(gender == "M"),
            "gender_female" => flag(gender == "F"),
            "admission_era_year" => era_year.map(f64::from),
            "height_cm" => d.height_cm,
            "weight_kg" => d.weight_kg,
            "bmi" => bmi,
            id if id.starts_with("eth_") => flag(ethnicity.feature_id() == id),
            id if id.starts_with("unit_") && DERIVED_STATIC_IDS.contains(&id) => flag(unit == id),
            id => {
                let j = maps.comorbidities().iter().position(|c| c.name == id);
                flag(j.is_some_and(|j| comorbidities[j]))
            }
        })
        .collect();
    StayStatic {
        key: stay.key.clone(),
        age: d.age,
        gender: gender.to_string(),
        ethnicity,
        admission_era,
        anchor_year_group: d.anchor_year_group.clone(),
        los_hours,
        hospital_mortality: d.hospital_mortality,
        icu_mortality: d.icu_mortality,
        comorbidities,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Demographics, IcdVersion, RawInterval, VitalEvent};
    use chrono::NaiveDate;

    fn stay(id: i64, age: f64, los_h: i64) -> StayRecord {
        StayRecord {
            key: StayKey::eicu(id),
            times: Some(StayTimes::Offset {
                discharge_offset: Some(los_h * 60),
            }),
            demographics: Demographics {
                age: Some(age),
                present: true,
                ..Default::default()
            },
            diagnoses: vec![],
            vitals: vec![],
            intervals: vec![],
            cultures: vec![],
        }
    }

    #[test]
    fn los_computation() {
        let d1 = NaiveDate::from_ymd_opt(2150, 3, 1).unwrap().and_hms_opt(10, 0, 0).unwrap();
        let d2 = NaiveDate::from_ymd_opt(2150, 3, 2).unwrap().and_hms_opt(10, 0, 0).unwrap();
        assert_eq!(compute_los(&StayTimes::Absolute { intime: d1, outtime: Some(d2) }), Some(24.0));
        assert_eq!(compute_los(&StayTimes::Offset { discharge_offset: Some(4320) }), Some(72.0));
        assert_eq!(compute_los(&StayTimes::Absolute { intime: d2, outtime: Some(d1) }), None);
        assert_eq!(compute_los(&StayTimes::Offset { discharge_offset: Some(0) }), None);
    }

    #[test]
    fn boundaries_are_strict() {
        let maps = ConceptMaps::default_maps();
        let stays = vec![stay(1, 17.5, 72), stay(2, 50.0, 24), stay(3, 18.0, 72), stay(4, 50.0, 72), stay(5, 50.0, 240)];
        let r = select_cohort(&CohortCriteria::default(), &stays, &maps, None).unwrap();
        assert_eq!(r.included.iter().map(|k| k.icu_stay_id).collect::<Vec<_>>(), vec![4]);
        let reasons: Vec<_> = r.excluded.iter().map(|(k, r)| (k.icu_stay_id, *r)).collect();
        assert_eq!(
            reasons,
            vec![
                (1, ExclusionReason::AgeOut),
                (2, ExclusionReason::LosOut),
                (3, ExclusionReason::AgeOut),
                (5, ExclusionReason::LosOut)
            ]
        );
    }

    #[test]
    fn invalid_los_is_excluded() {
        let maps = ConceptMaps::default_maps();
        let mut s = stay(1, 50.0, 72);
        s.times = Some(StayTimes::Offset { discharge_offset: Some(-10) });
        let r = select_cohort(&CohortCriteria::default(), &[s], &maps, None).unwrap();
        assert_eq!(r.excluded[0].1, ExclusionReason::LosOut);
    }

    #[test]
    fn custom_ids() {
        let maps = ConceptMaps::default_maps();
        let criteria = CohortCriteria {
            condition: Condition::CustomId,
            custom_ids: Some(vec![7]),
            ..Default::default()
        };
        let r = select_cohort(&criteria, &[stay(7, 50.0, 72), stay(8, 50.0, 72)], &maps, None).unwrap();
        assert_eq!(r.included[0].icu_stay_id, 7);
        assert_eq!(r.excluded[0].1, ExclusionReason::NotInCustomList);
        let empty = CohortCriteria {
            condition: Condition::CustomId,
            custom_ids: Some(vec![]),
            ..Default::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn condition_predicates() {
        let maps = ConceptMaps::default_maps();
        let norepi = maps.variable("norepinephrine").unwrap().output_position;
        let mut s = stay(1, 50.0, 72);
        s.intervals.push(RawInterval { var: norepi, start_h: Some(5.0), end_h: Some(9.0) });
        assert!(condition_predicate(&s, 72.0, Condition::Shock, &maps, None).unwrap());
        assert!(!condition_predicate(&s, 72.0, Condition::Arf, &maps, None).unwrap());

        let peep = maps.variable("peep").unwrap().output_position;
        s.vitals.push(VitalEvent { var: peep, hour: 3.0, value: 5.0 });
        assert!(condition_predicate(&s, 72.0, Condition::Arf, &maps, None).unwrap());

        s.diagnoses.push(("4280".into(), IcdVersion::Icd9));
        assert!(condition_predicate(&s, 72.0, Condition::Chf, &maps, None).unwrap());
        assert!(!condition_predicate(&s, 72.0, Condition::Copd, &maps, None).unwrap());

        assert!(matches!(
            condition_predicate(&s, 72.0, Condition::Sepsis3, &maps, None),
            Err(Error::NoSepsisHook)
        ));
        let hook: &Sepsis3Hook = &|st: &StayRecord| st.key.icu_stay_id == 1;
        assert!(condition_predicate(&s, 72.0, Condition::Sepsis3, &maps, Some(hook)).unwrap());
    }

    #[test]
    fn sepsis_without_hook_is_fatal() {
        let maps = ConceptMaps::default_maps();
        let criteria = CohortCriteria { condition: Condition::Sepsis3, ..Default::default() };
        assert!(matches!(select_cohort(&criteria, &[], &maps, None), Err(Error::NoSepsisHook)));
    }

    #[test]
    fn static_extraction() {
        let maps = ConceptMaps::default_maps();
        let mut s = stay(1, 50.0, 72);
        s.demographics.discharge_year = Some(2015);
        let st = extract_static(&s, 72.0, &maps);
        assert_eq!(st.admission_era, "2015");
        assert_eq!(st.comorbidities.len(), 17);
        assert!(st.comorbidities.iter().all(|b| !b));
        assert_eq!(st.features.len(), 35);

        s.diagnoses.push((crate::ingest::normalize_icd("398.91", IcdVersion::Icd9).unwrap(), IcdVersion::Icd9));
        let st = extract_static(&s, 72.0, &maps);
        let chf = maps.comorbidities().iter().position(|c| c.name == "congestive_heart_failure").unwrap();
        assert!(st.comorbidities[chf]);
        assert_eq!(st.comorbidities.iter().filter(|b| **b).count(), 1);
    }

    #[test]
    fn era_buckets() {
        assert_eq!(era_bucket("2008 - 2010"), Some(("2008-2010".into(), 2008)));
        assert_eq!(era_bucket("2017 - 2019"), Some(("2017-2019".into(), 2017)));
        assert_eq!(era_bucket("n/a"), None);
    }

    #[test]
    fn ethnicity_mapping() {
        assert_eq!(Ethnicity::from_raw(Some("WHITE - RUSSIAN")), Ethnicity::White);
        assert_eq!(Ethnicity::from_raw(Some("African American")), Ethnicity::BlackAfricanAmerican);
        assert_eq!(Ethnicity::from_raw(Some("HISPANIC/LATINO - PUERTO RICAN")), Ethnicity::Hispanic);
        assert_eq!(Ethnicity::from_raw(Some("Native American")), Ethnicity::AmericanIndianAlaskaNative);
        assert_eq!(Ethnicity::from_raw(None), Ethnicity::OtherUnknown);
        assert_eq!(Ethnicity::from_raw(Some("Caucasian")), Ethnicity::White);
        assert_eq!(Ethnicity::from_raw(Some("ASIAN - CHINESE")), Ethnicity::Asian);
    }

    proptest::proptest! {
        #[test]
        fn widening_never_removes(
            ages in proptest::collection::vec(10.0f64..95.0, 1..30),
            los in proptest::collection::vec(1i64..400, 30),
            lo in 0.0f64..100.0, hi in 101.0f64..300.0, widen in 0.0f64..50.0,
        ) {
            let maps = ConceptMaps::default_maps();
            let stays: Vec<_> = ages.iter().zip(&los).enumerate().map(|(i, (a, l))| stay(i as i64, *a, *l)).collect();
            let narrow = CohortCriteria { los_min_hours: lo, los_max_hours: hi, ..Default::default() };
            let wide = CohortCriteria { los_min_hours: (lo - widen).max(0.0), los_max_hours: hi + widen, age_min: 18.0 - widen, ..Default::default() };
            let a = select_cohort(&narrow, &stays, &maps, None).unwrap();
            let b = select_cohort(&wide, &stays, &maps, None).unwrap();
            proptest::prop_assert_eq!(a.included.len() + a.excluded.len(), stays.len());
            for k in &a.included {
                proptest::prop_assert!(b.included.contains(k));
            }
        }
    }
}
