//! Stage output writers. Every file goes through [`OutputSink`], which
//! writes atomically and records a digest for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::InterventionGrid;
use crate::timeseries::{vital_header, VitalGrid};

#[derive(Debug)]
pub struct OutputSink {
    root: PathBuf,
    pub digests: BTreeMap<String, String>,
}

impl OutputSink {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputSink { root: root.to_path_buf(), digests: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write `bytes` to `rel` (slash-separated) via a temporary file and a
    /// rename.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.digests.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(format!("{rel}: {e}")))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn push_opt(buf: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        let _ = write!(buf, "{v}");
    }
}

fn header_line(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

/// Plain CSV from already-formatted cells. Cells must not need quoting.
pub fn simple_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// Quoted CSV for free-text cells.
pub fn quoted_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("csv encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv encoding: {e}")))
}

pub fn vital_csv(grids: &[VitalGrid], columns: &[String], with_indicators: bool) -> Vec<u8> {
    let header = header_line(&vital_header(columns, with_indicators));
    let chunks: Vec<String> = grids
        .par_iter()
        .map(|g| {
            let mut buf = String::with_capacity(g.n_bins * g.n_vars() * 8);
            for t in 0..g.n_bins {
                let _ = write!(buf, "{},{t}", g.stay_id);
                let row = g.row(t);
                for c in row {
                    buf.push(',');
                    push_opt(&mut buf, c.value);
                }
                if with_indicators {
                    for c in row {
                        buf.push_str(if c.indicator { ",1" } else { ",0" });
                    }
                }
                buf.push('\n');
            }
            buf
        })
        .collect();
    let mut out = header.into_bytes();
    for c in chunks {
        out.extend_from_slice(c.as_bytes());
    }
    out
}

pub fn static_csv(columns: &[String], rows: &[(i64, Vec<Option<f64>>)]) -> Vec<u8> {
    let mut h = vec!["stay_id".to_string()];
    h.extend(columns.iter().cloned());
    let mut out = header_line(&h);
    for (id, values) in rows {
        let _ = write!(out, "{id}");
        for v in values {
            out.push(',');
            push_opt(&mut out, *v);
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn intervention_csv(grids: &[InterventionGrid], columns: &[String]) -> Vec<u8> {
    let mut h = vec!["stay_id".to_string(), "bin".to_string()];
    h.extend(columns.iter().cloned());
    let mut out = header_line(&h);
    for g in grids {
        for t in 0..g.n_bins {
            let _ = write!(out, "{},{t}", g.stay_id);
            for b in g.row(t) {
                out.push_str(if *b == 1 { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
