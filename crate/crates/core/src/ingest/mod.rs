//! Source-schema ingestion: typed rows from flat-file table exports of the two
//! supported ICU database families, plus the time and code normalization that
//! has to happen before anything is mapped onto canonical variables.

mod bundle;
mod icd;
mod table;

use std::fmt;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{
    load_bundle, Bundle, CultureEvent, Demographics, IngestCounters, RawInterval, StayRecord, StayTimes,
    VitalEvent,
};
pub use icd::{normalize_icd, IcdVersion};
pub use table::{
    parse_source_table, read_records, resolve_table_path, table_schema, EventStream, Layout,
    ParseStats, RecordTable, TableSchema, ValueKind,
};

/// Schema family of a source bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[serde(rename = "mimic")]
    MimicLike,
    #[serde(rename = "eicu")]
    EicuLike,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::MimicLike => "mimic",
            Source::EicuLike => "eicu",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mimic" | "mimic-like" | "mimiclike" => Ok(Source::MimicLike),
            "eicu" | "eicu-like" | "eiculike" => Ok(Source::EicuLike),
            _ => Err(crate::error::Error::Config(format!("unknown source `{s}`; use mimic or eicu"))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Native event time encoding: MIMIC-like exports carry wall-clock timestamps,
/// eICU-like exports carry signed minute offsets from ICU unit admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTime {
    Absolute(NaiveDateTime),
    OffsetMinutes(i64),
}

/// Identifiers of one ICU stay. MIMIC-like keys carry all three identifiers;
/// eICU-like keys use `patientunitstayid` as the stay id and the health-system
/// stay id in place of `hadm_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StayKey {
    pub source: Source,
    pub subject_id: Option<i64>,
    pub hadm_id: Option<i64>,
    pub icu_stay_id: i64,
}

impl StayKey {
    pub fn eicu(stay_id: i64) -> Self {
        StayKey {
            source: Source::EicuLike,
            subject_id: None,
            hadm_id: None,
            icu_stay_id: stay_id,
        }
    }

    pub fn mimic(subject_id: i64, hadm_id: i64, stay_id: i64) -> Self {
        StayKey {
            source: Source::MimicLike,
            subject_id: Some(subject_id),
            hadm_id: Some(hadm_id),
            icu_stay_id: stay_id,
        }
    }
}

/// Which record a raw row belongs to. Some MIMIC-like tables (labs,
/// microbiology, diagnoses) are keyed by hospital admission rather than by ICU
/// stay; those rows are resolved to stays when the bundle is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowOwner {
    Stay(i64),
    Admission(i64),
}

/// One raw timestamped measurement or treatment record, pre-harmonization.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEventRow {
    pub source: Source,
    pub owner: RowOwner,
    pub raw_key: String,
    /// Start time for interval rows. `None` only for interval rows with an
    /// empty start cell, which interval resolution drops and counts.
    pub event_time: Option<SourceTime>,
    pub end_time: Option<SourceTime>,
    pub value: Option<f64>,
    pub text_value: Option<String>,
    pub unit: Option<String>,
}

/// Hours since ICU admission. Offsets need no anchor; absolute times do.
pub fn to_relative_hours(t: SourceTime, icu_admit: Option<NaiveDateTime>) -> Result<f64> {
    match t {
        SourceTime::OffsetMinutes(m) => Ok(m as f64 / 60.0),
        SourceTime::Absolute(ts) => {
            let admit = icu_admit.ok_or(Error::MissingAnchor)?;
            Ok((ts - admit).num_seconds() as f64 / 3600.0)
        }
    }
}

pub(crate) fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub(crate) fn parse_offset(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f = s.parse::<f64>().ok()?;
    (f.is_finite() && f.fract() == 0.0).then_some(f as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2130, 5, 1)
            .unwrap()
            .and_hms_opt(h, m, 0)
            .unwrap()
    }

    #[test]
    fn relative_hours() {
        assert_eq!(to_relative_hours(SourceTime::OffsetMinutes(0), None).unwrap(), 0.0);
        assert_eq!(to_relative_hours(SourceTime::OffsetMinutes(90), None).unwrap(), 1.5);
        assert_eq!(to_relative_hours(SourceTime::OffsetMinutes(-30), None).unwrap(), -0.5);
        let h = to_relative_hours(SourceTime::Absolute(ts(12, 30)), Some(ts(10, 0))).unwrap();
        assert_eq!(h, 2.5);
        assert!(matches!(
            to_relative_hours(SourceTime::Absolute(ts(12, 30)), None),
            Err(Error::MissingAnchor)
        ));
    }

    #[test]
    fn offsets_accept_integral_floats_only() {
        assert_eq!(parse_offset(" -30 "), Some(-30));
        assert_eq!(parse_offset("120.0"), Some(120));
        assert_eq!(parse_offset("1.5"), None);
        assert_eq!(parse_offset("abc"), None);
    }

    proptest::proptest! {
        #[test]
        fn time_representations_agree(admit_min in 0i64..100_000, delta in -5_000i64..50_000) {
            let base = ts(0, 0);
            let admit = base + chrono::Duration::minutes(admit_min);
            let t = admit + chrono::Duration::minutes(delta);
            let direct = to_relative_hours(SourceTime::Absolute(t), Some(admit)).unwrap();
            let via_offset = to_relative_hours(SourceTime::OffsetMinutes(delta), None).unwrap();
            proptest::prop_assert_eq!(direct, via_offset);
        }
    }
}
