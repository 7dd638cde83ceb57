//! Table schemas for both source families and a streaming row parser.
//!
//! Only the columns the pipeline consumes are required; extra columns in an
//! export are ignored (or, for wide tables, treated as value columns).

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use csv::StringRecord;

use super::{parse_offset, parse_timestamp, RowOwner, Source, SourceEventRow, SourceTime};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Cell must parse as a finite number; anything else skips the row.
    Numeric,
    /// Numbers become `value`, anything else becomes `text_value`.
    Mixed,
    /// Culture site or treatment label rows: the key column is the payload.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwnerColumn {
    Stay(&'static str),
    Admission(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Static/demographic table read as plain records.
    Records,
    /// One event per row.
    Long {
        owner: OwnerColumn,
        time: &'static str,
        end: Option<&'static str>,
        key: &'static str,
        value: Option<(&'static str, ValueKind)>,
        unit: Option<&'static str>,
    },
    /// One event per non-empty value column; the column name is the raw key.
    Wide {
        owner: OwnerColumn,
        time: &'static str,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct TableSchema {
    pub name: &'static str,
    pub source: Source,
    pub required: &'static [&'static str],
    pub layout: Layout,
}

use Layout::*;
use OwnerColumn::*;
use Source::*;

const SCHEMAS: &[TableSchema] = &[
    TableSchema {
        name: "icustays",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "stay_id", "first_careunit", "intime", "outtime"],
        layout: Records,
    },
    TableSchema {
        name: "patients",
        source: MimicLike,
        required: &["subject_id", "gender", "anchor_age", "anchor_year", "anchor_year_group"],
        layout: Records,
    },
    TableSchema {
        name: "admissions",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "race", "hospital_expire_flag", "deathtime"],
        layout: Records,
    },
    TableSchema {
        name: "diagnoses_icd",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "icd_code", "icd_version"],
        layout: Records,
    },
    TableSchema {
        name: "labevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "itemid", "charttime", "valuenum", "valueuom"],
        layout: Long {
            owner: Admission("hadm_id"),
            time: "charttime",
            end: None,
            key: "itemid",
            value: Some(("valuenum", ValueKind::Numeric)),
            unit: Some("valueuom"),
        },
    },
    TableSchema {
        name: "chartevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "stay_id", "itemid", "charttime", "valuenum", "valueuom"],
        layout: Long {
            owner: Stay("stay_id"),
            time: "charttime",
            end: None,
            key: "itemid",
            value: Some(("valuenum", ValueKind::Numeric)),
            unit: Some("valueuom"),
        },
    },
    TableSchema {
        name: "outputevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "stay_id", "itemid", "charttime", "value", "valueuom"],
        layout: Long {
            owner: Stay("stay_id"),
            time: "charttime",
            end: None,
            key: "itemid",
            value: Some(("value", ValueKind::Numeric)),
            unit: Some("valueuom"),
        },
    },
    TableSchema {
        name: "procedureevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "stay_id", "itemid", "starttime", "endtime"],
        layout: Long {
            owner: Stay("stay_id"),
            time: "starttime",
            end: Some("endtime"),
            key: "itemid",
            value: None,
            unit: None,
        },
    },
    TableSchema {
        name: "inputevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "stay_id", "itemid", "starttime", "endtime"],
        layout: Long {
            owner: Stay("stay_id"),
            time: "starttime",
            end: Some("endtime"),
            key: "itemid",
            value: None,
            unit: None,
        },
    },
    TableSchema {
        name: "microbiologyevents",
        source: MimicLike,
        required: &["subject_id", "hadm_id", "charttime", "spec_type_desc"],
        layout: Long {
            owner: Admission("hadm_id"),
            time: "charttime",
            end: None,
            key: "spec_type_desc",
            value: None,
            unit: None,
        },
    },
    TableSchema {
        name: "patient",
        source: EicuLike,
        required: &[
            "patientunitstayid",
            "patienthealthsystemstayid",
            "uniquepid",
            "gender",
            "age",
            "ethnicity",
            "unittype",
            "admissionheight",
            "admissionweight",
            "hospitaldischargeyear",
            "unitdischargeoffset",
            "hospitaldischargestatus",
            "unitdischargestatus",
        ],
        layout: Records,
    },
    TableSchema {
        name: "diagnosis",
        source: EicuLike,
        required: &["patientunitstayid", "icd9code"],
        layout: Records,
    },
    TableSchema {
        name: "lab",
        source: EicuLike,
        required: &["patientunitstayid", "labresultoffset", "labname", "labresult", "labmeasurenamesystem"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "labresultoffset",
            end: None,
            key: "labname",
            value: Some(("labresult", ValueKind::Numeric)),
            unit: Some("labmeasurenamesystem"),
        },
    },
    TableSchema {
        name: "nursecharting",
        source: EicuLike,
        required: &["patientunitstayid", "nursingchartoffset", "nursingchartcelltypevalname", "nursingchartvalue"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "nursingchartoffset",
            end: None,
            key: "nursingchartcelltypevalname",
            value: Some(("nursingchartvalue", ValueKind::Mixed)),
            unit: None,
        },
    },
    TableSchema {
        name: "respiratorycharting",
        source: EicuLike,
        required: &["patientunitstayid", "respchartoffset", "respchartvaluelabel", "respchartvalue"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "respchartoffset",
            end: None,
            key: "respchartvaluelabel",
            value: Some(("respchartvalue", ValueKind::Mixed)),
            unit: None,
        },
    },
    TableSchema {
        name: "intakeoutput",
        source: EicuLike,
        required: &["patientunitstayid", "intakeoutputoffset", "celllabel", "cellvaluenumeric"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "intakeoutputoffset",
            end: None,
            key: "celllabel",
            value: Some(("cellvaluenumeric", ValueKind::Numeric)),
            unit: None,
        },
    },
    TableSchema {
        name: "vitalperiodic",
        source: EicuLike,
        required: &["patientunitstayid", "observationoffset"],
        layout: Wide {
            owner: Stay("patientunitstayid"),
            time: "observationoffset",
        },
    },
    TableSchema {
        name: "microlab",
        source: EicuLike,
        required: &["patientunitstayid", "culturetakenoffset", "culturesite"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "culturetakenoffset",
            end: None,
            key: "culturesite",
            value: None,
            unit: None,
        },
    },
    TableSchema {
        name: "treatment",
        source: EicuLike,
        required: &["patientunitstayid", "treatmentstring", "treatmentstartoffset", "treatmentstopoffset"],
        layout: Long {
            owner: Stay("patientunitstayid"),
            time: "treatmentstartoffset",
            end: Some("treatmentstopoffset"),
            key: "treatmentstring",
            value: None,
            unit: None,
        },
    },
];

pub fn table_schema(table_id: &str) -> Result<&'static TableSchema> {
    SCHEMAS
        .iter()
        .find(|s| s.name == table_id)
        .ok_or_else(|| Error::UnknownTable {
            table: table_id.to_string(),
        })
}

pub(crate) fn schemas_for(source: Source) -> impl Iterator<Item = &'static TableSchema> {
    SCHEMAS.iter().filter(move |s| s.source == source)
}

/// Locate `<dir>/<table>.csv` (comma) or `<dir>/<table>.tsv` (tab).
pub fn resolve_table_path(dir: &Path, table: &str) -> Option<PathBuf> {
    ["csv", "tsv"]
        .iter()
        .map(|ext| dir.join(format!("{table}.{ext}")))
        .find(|p| p.is_file())
}

/// Record, skip and event counts for one parsed file.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParseStats {
    pub records: u64,
    pub emitted: u64,
    pub skipped: u64,
    pub events: u64,
}

fn open_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let delimiter = if path.extension().is_some_and(|e| e == "tsv") {
        b'\t'
    } else {
        b','
    };
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(BufReader::with_capacity(1 << 16, file)))
}

fn column_index(
    path: &Path,
    headers: &StringRecord,
    required: &[&str],
) -> Result<HashMap<String, usize>> {
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let missing: Vec<String> = required
        .iter()
        .filter(|c| !index.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            missing,
        });
    }
    Ok(index)
}

/// A whole record table held in memory, addressed by column name.
#[derive(Debug)]
pub struct RecordTable {
    columns: HashMap<String, usize>,
    pub rows: Vec<StringRecord>,
    pub stats: ParseStats,
}

impl RecordTable {
    pub fn get<'r>(&self, row: &'r StringRecord, column: &str) -> Option<&'r str> {
        let i = *self.columns.get(column)?;
        row.get(i).map(str::trim).filter(|s| !s.is_empty())
    }
}

/// Read a record-layout table (demographics, stays, diagnoses).
pub fn read_records(path: &Path, table_id: &str) -> Result<RecordTable> {
    let schema = table_schema(table_id)?;
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let columns = column_index(path, &headers, schema.required)?;
    let mut stats = ParseStats::default();
    let mut rows = Vec::new();
    for rec in reader.records() {
        stats.records += 1;
        match rec {
            Ok(r) if r.len() == headers.len() => {
                stats.emitted += 1;
                rows.push(r);
            }
            Ok(r) => {
                stats.skipped += 1;
                let line = r.position().map_or(0, |p| p.line());
                log::warn!("{}:{line}: expected {} fields, found {}", path.display(), headers.len(), r.len());
            }
            Err(e) => {
                stats.skipped += 1;
                log::warn!("{}: {e}", path.display());
            }
        }
    }
    Ok(RecordTable {
        columns,
        rows,
        stats,
    })
}

#[derive(Debug)]
struct Columns {
    owner: (bool, usize),
    time: usize,
    end: Option<usize>,
    key: Option<usize>,
    value: Option<(usize, ValueKind)>,
    unit: Option<usize>,
    wide: Vec<(usize, String)>,
}

/// Streaming iterator over the events of one long- or wide-layout table.
///
/// Rows with an unparseable cell are skipped and counted with a warning that
/// carries the line number; [`EventStream::stats`] reports the totals.
pub struct EventStream {
    path: PathBuf,
    source: Source,
    reader: csv::Reader<BufReader<File>>,
    n_fields: usize,
    cols: Columns,
    record: StringRecord,
    pending: VecDeque<SourceEventRow>,
    stats: ParseStats,
}

/// Open an event table for streaming. Fails on a missing file, an unknown or
/// record-layout table id, or a header lacking required columns.
pub fn parse_source_table(path: &Path, table_id: &str) -> Result<EventStream> {
    let schema = table_schema(table_id)?;
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "table file not found"),
        ));
    }
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let index = column_index(path, &headers, schema.required)?;
    let cols = match schema.layout {
        Records => {
            return Err(Error::Invalid(format!(
                "table `{table_id}` is a record table, not an event table"
            )))
        }
        Long {
            owner,
            time,
            end,
            key,
            value,
            unit,
        } => Columns {
            owner: owner_col(&index, owner),
            time: index[time],
            end: end.map(|c| index[c]),
            key: Some(index[key]),
            value: value.map(|(c, k)| (index[c], k)),
            unit: unit.map(|c| index[c]),
            wide: Vec::new(),
        },
        Wide { owner, time } => Columns {
            owner: owner_col(&index, owner),
            time: index[time],
            end: None,
            key: None,
            value: None,
            unit: None,
            wide: headers
                .iter()
                .enumerate()
                .filter(|(_, h)| !schema.required.contains(&h.trim()))
                .map(|(i, h)| (i, h.trim().to_string()))
                .collect(),
        },
    };
    Ok(EventStream {
        path: path.to_path_buf(),
        source: schema.source,
        reader,
        n_fields: headers.len(),
        cols,
        record: StringRecord::new(),
        pending: VecDeque::new(),
        stats: ParseStats::default(),
    })
}

fn owner_col(index: &HashMap<String, usize>, owner: OwnerColumn) -> (bool, usize) {
    match owner {
        Stay(c) => (true, index[c]),
        Admission(c) => (false, index[c]),
    }
}

impl EventStream {
    pub fn stats(&self) -> &ParseStats {
        &self.stats
    }

    pub fn source(&self) -> Source {
        self.source
    }

    fn skip(&mut self, why: &str) {
        self.stats.skipped += 1;
        let line = self.record.position().map_or(0, |p| p.line());
        log::warn!("{}:{line}: skipped row: {why}", self.path.display());
    }

    fn parse_time(&self, cell: &str) -> Option<SourceTime> {
        match self.source {
            Source::MimicLike => parse_timestamp(cell).map(SourceTime::Absolute),
            Source::EicuLike => parse_offset(cell).map(SourceTime::OffsetMinutes),
        }
    }

    /// Parse the current record into zero or more pending events.
    fn parse_current(&mut self) -> std::result::Result<(), String> {
        let rec = &self.record;
        if rec.len() != self.n_fields {
            return Err(format!("expected {} fields, found {}", self.n_fields, rec.len()));
        }
        let cell = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let owner_id: i64 = cell(self.cols.owner.1)
            .parse()
            .map_err(|_| format!("bad identifier `{}`", cell(self.cols.owner.1)))?;
        let owner = if self.cols.owner.0 {
            RowOwner::Stay(owner_id)
        } else {
            RowOwner::Admission(owner_id)
        };
        let interval = self.cols.end.is_some();
        let time_cell = cell(self.cols.time);
        let event_time = if time_cell.is_empty() && interval {
            None
        } else {
            Some(
                self.parse_time(time_cell)
                    .ok_or_else(|| format!("bad time `{time_cell}`"))?,
            )
        };
        let end_time = match self.cols.end {
            Some(i) if !cell(i).is_empty() => Some(
                self.parse_time(cell(i))
                    .ok_or_else(|| format!("bad end time `{}`", cell(i)))?,
            ),
            _ => None,
        };

        if !self.cols.wide.is_empty() {
            for (i, name) in &self.cols.wide {
                let c = cell(*i);
                if c.is_empty() {
                    continue;
                }
                let v = parse_number(c).ok_or_else(|| format!("non-numeric `{c}` in `{name}`"))?;
                self.pending.push_back(SourceEventRow {
                    source: self.source,
                    owner,
                    raw_key: name.clone(),
                    event_time,
                    end_time: None,
                    value: Some(v),
                    text_value: None,
                    unit: None,
                });
            }
            return Ok(());
        }

        let key = self.cols.key.map(cell).unwrap_or("");
        if key.is_empty() {
            return Err("empty item key".into());
        }
        let (value, text_value) = match self.cols.value {
            None => (None, None),
            Some((i, kind)) => {
                let c = cell(i);
                if c.is_empty() {
                    return Err("empty value".into());
                }
                match (parse_number(c), kind) {
                    (Some(v), _) => (Some(v), None),
                    (None, ValueKind::Numeric) => return Err(format!("non-numeric value `{c}`")),
                    (None, _) => (None, Some(c.to_string())),
                }
            }
        };
        let unit = self
            .cols
            .unit
            .map(cell)
            .filter(|u| !u.is_empty())
            .map(str::to_string);
        self.pending.push_back(SourceEventRow {
            source: self.source,
            owner,
            raw_key: key.to_string(),
            event_time,
            end_time,
            value,
            text_value,
            unit,
        });
        Ok(())
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl Iterator for EventStream {
    type Item = SourceEventRow;

    fn next(&mut self) -> Option<SourceEventRow> {
        loop {
            if let Some(ev) = self.pending.pop_front() {
                self.stats.events += 1;
                return Some(ev);
            }
            match self.reader.read_record(&mut self.record) {
                Ok(false) => return None,
                Ok(true) => {
                    self.stats.records += 1;
                    match self.parse_current() {
                        Ok(()) => self.stats.emitted += 1,
                        Err(why) => {
                            self.pending.clear();
                            self.skip(&why);
                        }
                    }
                }
                Err(e) => {
                    self.stats.records += 1;
                    self.skip(&e.to_string());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_table_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "labevents.csv", "subject_id,hadm_id,itemid,charttime,valuenum,valueuom\n");
        let mut s = parse_source_table(&p, "labevents").unwrap();
        assert!(s.next().is_none());
        assert_eq!(s.stats().skipped, 0);
        assert_eq!(s.stats().records, 0);
    }

    #[test]
    fn non_numeric_value_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "labevents.csv",
            "subject_id,hadm_id,itemid,charttime,valuenum,valueuom\n\
             1,10,50971,2130-01-01 10:00:00,4.1,mEq/L\n\
             1,10,50971,2130-01-01 11:00:00,high,mEq/L\n\
             1,10,50983,2130-01-01 12:00:00,140,mEq/L\n",
        );
        let mut s = parse_source_table(&p, "labevents").unwrap();
        let rows: Vec<_> = s.by_ref().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(s.stats().skipped, 1);
        assert_eq!(s.stats().records, s.stats().emitted + s.stats().skipped);
        assert_eq!(rows[0].owner, RowOwner::Admission(10));
        assert_eq!(rows[1].value, Some(140.0));
    }

    #[test]
    fn negative_offsets_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "nursecharting.csv",
            "nursingchartvalue,patientunitstayid,nursingchartoffset,nursingchartcelltypevalname\n\
             88,42,-30,Heart Rate\n\
             Unable to score,42,15,Eyes\n",
        );
        let rows: Vec<_> = parse_source_table(&p, "nursecharting").unwrap().collect();
        assert_eq!(rows[0].event_time, Some(SourceTime::OffsetMinutes(-30)));
        assert_eq!(rows[0].value, Some(88.0));
        assert_eq!(rows[1].text_value.as_deref(), Some("Unable to score"));
    }

    #[test]
    fn header_mismatch_names_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "chartevents.csv", "subject_id,stay_id,itemid,charttime\n");
        match parse_source_table(&p, "chartevents") {
            Err(Error::HeaderMismatch { missing, .. }) => {
                assert_eq!(missing, vec!["hadm_id", "valuenum", "valueuom"])
            }
            other => panic!("unexpected: {:?}", other.err()),
        }
    }

    #[test]
    fn unknown_table_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            parse_source_table(&dir.path().join("x.csv"), "nope"),
            Err(Error::UnknownTable { .. })
        ));
        assert!(matches!(
            parse_source_table(&dir.path().join("lab.csv"), "lab"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn wide_rows_fan_out() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "vitalperiodic.tsv",
            "patientunitstayid\tobservationoffset\theartrate\tsao2\n7\t5\t80\t\n7\t10\t82\t97\n7\t15\tx\t97\n",
        );
        let mut s = parse_source_table(&p, "vitalperiodic").unwrap();
        let rows: Vec<_> = s.by_ref().collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].raw_key, "sao2");
        assert_eq!(s.stats().records, 3);
        assert_eq!(s.stats().skipped, 1);
        assert_eq!(s.stats().events, 3);
    }

    #[test]
    fn intervals_allow_empty_start_and_end() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "treatment.csv",
            "patientunitstayid,treatmentstring,treatmentstartoffset,treatmentstopoffset\n3,norepinephrine,60,\n3,dopamine,,120\n",
        );
        let rows: Vec<_> = parse_source_table(&p, "treatment").unwrap().collect();
        assert_eq!(rows[0].end_time, None);
        assert_eq!(rows[1].event_time, None);
        assert_eq!(rows[1].end_time, Some(SourceTime::OffsetMinutes(120)));
    }
}
