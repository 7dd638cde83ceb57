//! Write a latent cohort as flat-file exports of either schema family.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};

use super::oracle::to_fahrenheit;
use super::{EthnicityKind, LatentCohort, LatentStay, UnitKind};
use crate::concepts::{CanonicalVariable, ConceptMaps};
use crate::error::{Error, Result};

type Writer = csv::Writer<BufWriter<File>>;

fn writer(dir: &Path, table: &str, header: &[&str]) -> Result<Writer> {
    let path = dir.join(format!("{table}.csv"));
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| Error::csv(&path, e))?;
    Ok(w)
}

struct Tables {
    dir: std::path::PathBuf,
    open: Vec<(&'static str, Writer)>,
}

impl Tables {
    fn new(dir: &Path, specs: &[(&'static str, &[&str])]) -> Result<Self> {
        let open = specs
            .iter()
            .map(|&(t, h)| Ok((t, writer(dir, t, h)?)))
            .collect::<Result<_>>()?;
        Ok(Tables { dir: dir.to_path_buf(), open })
    }

    fn row<S: AsRef<[u8]>>(&mut self, table: &str, fields: impl IntoIterator<Item = S>) -> Result<()> {
        let (t, w) = self.open.iter_mut().find(|(t, _)| *t == table).expect("table opened");
        let path = self.dir.join(format!("{t}.csv"));
        w.write_record(fields).map_err(|e| Error::csv(path, e))
    }

    fn finish(self) -> Result<()> {
        for (t, mut w) in self.open {
            w.flush().map_err(|e| Error::io(self.dir.join(format!("{t}.csv")), e))?;
        }
        Ok(())
    }
}

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2150, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn stamp(s: &LatentStay, minute: i64) -> String {
    (epoch() + Duration::minutes(s.admit_minute + minute)).format("%Y-%m-%d %H:%M:%S").to_string()
}

fn opt_stamp(s: &LatentStay, minute: Option<i64>) -> String {
    minute.map(|m| stamp(s, m)).unwrap_or_default()
}

fn first_key(v: &CanonicalVariable, source: crate::ingest::Source) -> &str {
    v.keys(source).iter().next().map(String::as_str).unwrap_or_default()
}

const PERIODIC: &[&str] = &[
    "heartrate",
    "systemicsystolic",
    "systemicdiastolic",
    "systemicmean",
    "respiration",
    "temperature",
    "sao2",
    "cvp",
    "pasystolic",
    "padiastolic",
    "pamean",
    "etco2",
];

pub(super) fn mimic(latent: &LatentCohort, dir: &Path, maps: &ConceptMaps) -> Result<()> {
    use crate::ingest::Source::MimicLike;
    let mut t = Tables::new(
        dir,
        &[
            ("patients", &["subject_id", "gender", "anchor_age", "anchor_year", "anchor_year_group", "dod"]),
            ("admissions", &["subject_id", "hadm_id", "admittime", "dischtime", "deathtime", "race", "hospital_expire_flag"]),
            ("icustays", &["subject_id", "hadm_id", "stay_id", "first_careunit", "last_careunit", "intime", "outtime", "los"]),
            ("diagnoses_icd", &["subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"]),
            ("labevents", &["labevent_id", "subject_id", "hadm_id", "itemid", "charttime", "value", "valuenum", "valueuom"]),
            ("chartevents", &["subject_id", "hadm_id", "stay_id", "charttime", "itemid", "value", "valuenum", "valueuom"]),
            ("outputevents", &["subject_id", "hadm_id", "stay_id", "charttime", "itemid", "value", "valueuom"]),
            ("procedureevents", &["subject_id", "hadm_id", "stay_id", "starttime", "endtime", "itemid"]),
            ("inputevents", &["subject_id", "hadm_id", "stay_id", "starttime", "endtime", "itemid", "amount"]),
            ("microbiologyevents", &["subject_id", "hadm_id", "charttime", "spec_type_desc"]),
        ],
    )?;
    let vitals = maps.vitals();
    let interventions = maps.interventions();
    let height = maps.variable("height_cm").map(|v| first_key(v, MimicLike).to_string()).unwrap_or_default();
    let weight = maps.variable("weight_kg").map(|v| first_key(v, MimicLike).to_string()).unwrap_or_default();
    let mut lab_id = 0u64;
    for s in &latent.stays {
        let (subj, hadm, stay) = (s.subject_id.to_string(), s.hadm_id.to_string(), s.stay_id.to_string());
        let intime = epoch() + Duration::minutes(s.admit_minute);
        let year = chrono::Datelike::year(&intime);
        let k = s.anchor_shift_years;
        t.row(
            "patients",
            [
                subj.clone(),
                if s.male { "M" } else { "F" }.into(),
                (i64::from(s.age) - i64::from(k)).to_string(),
                (year - k).to_string(),
                format!("{} - {}", s.era.0, s.era.1),
                String::new(),
            ],
        )?;
        let outtime = s.los_minutes;
        let race = match s.ethnicity {
            EthnicityKind::AmericanIndian => "AMERICAN INDIAN/ALASKA NATIVE",
            EthnicityKind::Asian => "ASIAN - CHINESE",
            EthnicityKind::Hispanic => "HISPANIC/LATINO - PUERTO RICAN",
            EthnicityKind::Black => "BLACK/AFRICAN AMERICAN",
            EthnicityKind::Other => "UNKNOWN",
            EthnicityKind::White => "WHITE",
        };
        t.row(
            "admissions",
            [
                subj.clone(),
                hadm.clone(),
                stamp(s, -240),
                stamp(s, outtime + 1440),
                if s.died { stamp(s, outtime - 10) } else { String::new() },
                race.into(),
                if s.died { "1" } else { "0" }.into(),
            ],
        )?;
        let unit = match s.unit {
            UnitKind::Medical => "Medical Intensive Care Unit (MICU)",
            UnitKind::Surgical => "Surgical Intensive Care Unit (SICU)",
            UnitKind::Cardiac => "Cardiac Vascular Intensive Care Unit (CVICU)",
            UnitKind::Neuro => "Neuro Surgical Intensive Care Unit (Neuro SICU)",
            UnitKind::Other => "Medical/Surgical Intensive Care Unit (MICU/SICU)",
        };
        t.row(
            "icustays",
            [
                subj.clone(),
                hadm.clone(),
                stay.clone(),
                unit.into(),
                unit.into(),
                stamp(s, 0),
                stamp(s, outtime),
                format!("{}", s.los_minutes as f64 / 1440.0),
            ],
        )?;
        let mut seq = 0;
        for d in &s.diagnoses {
            for (code, version) in std::iter::once((&d.icd9, "9")).chain(d.icd10.iter().map(|c| (c, "10"))) {
                seq += 1;
                t.row("diagnoses_icd", [subj.as_str(), hadm.as_str(), &seq.to_string(), code, version])?;
            }
        }
        let anthro = -(s.stay_id % 60);
        for (item, v) in [(&height, s.height_cm), (&weight, s.weight_kg)] {
            let v = v.to_string();
            t.row("chartevents", [subj.as_str(), &hadm, &stay, &stamp(s, anthro), item, &v, &v, ""])?;
        }
        for e in &s.events {
            let var = vitals[e.var];
            if var.absent_in(MimicLike) {
                continue;
            }
            let f = s.fahrenheit && var.id == "temperature";
            let (key, value, unit) = if f {
                ("223761", to_fahrenheit(e.value), "°F")
            } else if var.id == "temperature" {
                ("223762", e.value, "°C")
            } else {
                (first_key(var, MimicLike), e.value, var.canonical_unit.as_str())
            };
            let value = value.to_string();
            let time = stamp(s, e.minute);
            if key.starts_with('5') {
                lab_id += 1;
                t.row("labevents", [&lab_id.to_string(), subj.as_str(), &hadm, key, &time, &value, &value, unit])?;
            } else if var.id == "urine_output" {
                t.row("outputevents", [subj.as_str(), &hadm, &stay, &time, key, &value, unit])?;
            } else {
                t.row("chartevents", [subj.as_str(), &hadm, &stay, &time, key, &value, &value, unit])?;
            }
        }
        for iv in &s.intervals {
            let var = interventions[iv.var];
            let key = first_key(var, MimicLike);
            let (a, b) = (opt_stamp(s, iv.start), opt_stamp(s, iv.end));
            if var.id == "ventilation" || var.id == "crrt" {
                t.row("procedureevents", [subj.as_str(), &hadm, &stay, &a, &b, key])?;
            } else {
                t.row("inputevents", [subj.as_str(), &hadm, &stay, &a, &b, key, "1"])?;
            }
        }
        for (m, site) in &s.cultures {
            t.row("microbiologyevents", [subj.as_str(), &hadm, &stamp(s, *m), site])?;
        }
    }
    t.finish()
}

/// Dotted form as eICU-like exports write it.
fn dotted(code: &str, icd10: bool) -> String {
    let head = if !icd10 && code.starts_with('E') { 4 } else { 3 };
    if code.len() > head {
        format!("{}.{}", &code[..head], &code[head..])
    } else {
        code.to_string()
    }
}

pub(super) fn eicu(latent: &LatentCohort, dir: &Path, maps: &ConceptMaps) -> Result<()> {
    use crate::ingest::Source::EicuLike;
    let mut wide_header = vec!["patientunitstayid", "observationoffset"];
    wide_header.extend_from_slice(PERIODIC);
    let mut t = Tables::new(
        dir,
        &[
            (
                "patient",
                &[
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
            ),
            ("diagnosis", &["diagnosisid", "patientunitstayid", "diagnosisoffset", "diagnosisstring", "icd9code"]),
            ("lab", &["labid", "patientunitstayid", "labresultoffset", "labname", "labresult", "labmeasurenamesystem"]),
            (
                "nursecharting",
                &["nursingchartid", "patientunitstayid", "nursingchartoffset", "nursingchartcelltypevalname", "nursingchartvalue"],
            ),
            ("respiratorycharting", &["respchartid", "patientunitstayid", "respchartoffset", "respchartvaluelabel", "respchartvalue"]),
            ("intakeoutput", &["intakeoutputid", "patientunitstayid", "intakeoutputoffset", "celllabel", "cellvaluenumeric"]),
            ("vitalperiodic", &wide_header),
            ("microlab", &["microlabid", "patientunitstayid", "culturetakenoffset", "culturesite", "organism"]),
            ("treatment", &["treatmentid", "patientunitstayid", "treatmentstartoffset", "treatmentstopoffset", "treatmentstring"]),
        ],
    )?;
    let vitals = maps.vitals();
    let interventions = maps.interventions();
    let mut row_id = 0u64;
    let mut next = || {
        row_id += 1;
        row_id.to_string()
    };
    for s in &latent.stays {
        let stay = s.stay_id.to_string();
        let ethnicity = match s.ethnicity {
            EthnicityKind::AmericanIndian => "Native American",
            EthnicityKind::Asian => "Asian",
            EthnicityKind::Hispanic => "Hispanic",
            EthnicityKind::Black => "African American",
            EthnicityKind::Other => "Other/Unknown",
            EthnicityKind::White => "Caucasian",
        };
        let unit = match s.unit {
            UnitKind::Medical => "MICU",
            UnitKind::Surgical => "SICU",
            UnitKind::Cardiac => "CCU-CTICU",
            UnitKind::Neuro => "Neuro ICU",
            UnitKind::Other => "Med-Surg ICU",
        };
        let status = if s.died { "Expired" } else { "Alive" };
        t.row(
            "patient",
            [
                stay.clone(),
                s.hadm_id.to_string(),
                format!("{:03}-{}", s.subject_id % 1000, s.subject_id),
                if s.male { "Male" } else { "Female" }.into(),
                if s.age > 89 { "> 89".to_string() } else { s.age.to_string() },
                ethnicity.into(),
                unit.into(),
                s.height_cm.to_string(),
                s.weight_kg.to_string(),
                s.discharge_year.to_string(),
                s.los_minutes.to_string(),
                status.into(),
                if s.eicu_status_unknown { String::new() } else { status.into() },
            ],
        )?;
        for d in &s.diagnoses {
            let mut cell = dotted(&d.icd9, false);
            if let Some(c) = &d.icd10 {
                cell.push_str(", ");
                cell.push_str(&dotted(c, true));
            }
            t.row("diagnosis", [next(), stay.clone(), "0".into(), "synthetic diagnosis".into(), cell])?;
        }
        for e in &s.events {
            let var = vitals[e.var];
            if var.absent_in(EicuLike) {
                continue;
            }
            let (off, value) = (e.minute.to_string(), e.value.to_string());
            let periodic = var.eicu_keys.iter().find(|k| PERIODIC.contains(&k.as_str()));
            if let Some(key) = periodic {
                let mut row = vec![stay.clone(), off];
                row.extend(PERIODIC.iter().map(|p| if p == key { value.clone() } else { String::new() }));
                t.row("vitalperiodic", row)?;
                continue;
            }
            let key = first_key(var, EicuLike).to_string();
            match var.output_position {
                17 => t.row("intakeoutput", [next(), stay.clone(), off, key, value])?,
                18..=24 => t.row("respiratorycharting", [next(), stay.clone(), off, key, value])?,
                26..=76 => t.row("lab", [next(), stay.clone(), off, key, value, var.canonical_unit.clone()])?,
                _ => t.row("nursecharting", [next(), stay.clone(), off, key, value])?,
            }
        }
        for iv in &s.intervals {
            let key = first_key(interventions[iv.var], EicuLike).to_string();
            let opt = |m: Option<i64>| m.map(|m| m.to_string()).unwrap_or_default();
            t.row("treatment", [next(), stay.clone(), opt(iv.start), opt(iv.end), key])?;
        }
        for (m, site) in &s.cultures {
            t.row("microlab", [next(), stay.clone(), m.to_string(), site.clone(), "no growth".into()])?;
        }
    }
    t.finish()
}
