#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ehrbridge::concepts::ConceptMaps;
use ehrbridge::ingest::Source;
use ehrbridge::pipeline::tables::{read_intervention_csv, read_labels_csv, read_static_csv, read_vital_csv};
use ehrbridge::synth::{generate_source_bundle, OracleExpectations, PlantSpec};
use ehrbridge::{ExitPoint, PipelineConfig};

/// Synthetic bundles for both sources under `dir`, with their expectations.
pub fn make_bundles(spec: &PlantSpec, dir: &Path) -> (OracleExpectations, OracleExpectations) {
    let maps = ConceptMaps::default_maps();
    let m = generate_source_bundle(spec, Source::MimicLike, &dir.join("mimic"), &maps).expect("mimic bundle");
    let e = generate_source_bundle(spec, Source::EicuLike, &dir.join("eicu"), &maps).expect("eicu bundle");
    (m, e)
}

pub fn config_for(spec: &PlantSpec, dir: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        source_mimic: Some(dir.join("mimic")),
        source_eicu: Some(dir.join("eicu")),
        cohort: spec.criteria.clone(),
        out: out.to_path_buf(),
        seed: spec.seed,
        threads: 1,
        ..PipelineConfig::default()
    }
}

pub fn stage_file(out: &Path, source: Source, exit: ExitPoint, file: &str) -> std::path::PathBuf {
    out.join(source.as_str()).join(exit.dir()).join(file)
}

/// Mismatches between the Vital table at `exit` and the oracle cells.
/// With `exact_ids` the table must hold exactly the oracle's stays; otherwise
/// it may hold more (before the missingness filter) and only oracle stays are
/// compared.
pub fn vital_mismatches(out: &Path, o: &OracleExpectations, exit: ExitPoint, dropped: &BTreeSet<String>, tol: f64, exact_ids: bool) -> (Vec<String>, usize) {
    let mut bad = Vec::new();
    let src = o.source;
    let (cols, grids) = read_vital_csv(&stage_file(out, src, exit, "vital.csv")).expect("vital table");
    let want_cols: Vec<String> = o.vital_columns.iter().filter(|c| !dropped.contains(*c)).cloned().collect();
    if cols != want_cols {
        bad.push(format!("{src}: vital columns {cols:?} != {want_cols:?}"));
        return (bad, 0);
    }
    let ids: Vec<i64> = grids.iter().map(|g| g.stay_id).collect();
    if exact_ids && ids != o.included {
        bad.push(format!("{src}: {} stays in the table, oracle {}", ids.len(), o.included.len()));
        return (bad, 0);
    }
    let by_id: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut recorded = 0;
    for s in &o.stays {
        let Some(&gi) = by_id.get(&s.stay_id) else {
            bad.push(format!("{src} stay {} missing", s.stay_id));
            continue;
        };
        let g = &grids[gi];
        if g.n_bins != s.n_bins {
            bad.push(format!("{src} stay {}: {} bins, oracle {}", s.stay_id, g.n_bins, s.n_bins));
            continue;
        }
        let want: BTreeMap<(usize, &str), f64> =
            s.cells.iter().filter(|c| !dropped.contains(&c.variable)).map(|c| ((c.bin, c.variable.as_str()), c.value)).collect();
        for t in 0..g.n_bins {
            for (j, c) in g.row(t).iter().enumerate() {
                let key = (t, cols[j].as_str());
                match (want.get(&key), c.value) {
                    (Some(w), Some(v)) if (w - v).abs() <= tol && c.indicator => recorded += 1,
                    (None, None) if !c.indicator => {}
                    (w, v) => bad.push(format!("{src} stay {} bin {t} {}: got {v:?}/{}, oracle {w:?}", s.stay_id, cols[j], c.indicator)),
                }
            }
        }
    }
    (bad, recorded)
}

/// Every mismatch between a finished run and the oracle, as readable lines.
/// `dropped` is the union of variables dropped by either source.
pub fn oracle_mismatches(out: &Path, o: &OracleExpectations, dropped: &BTreeSet<String>, tol: f64) -> Vec<String> {
    let src = o.source;
    let pre = |f: &str| stage_file(out, src, ExitPoint::PreImpute, f);
    let (mut bad, _) = vital_mismatches(out, o, ExitPoint::PreImpute, dropped, tol, true);
    let (raw_bad, _) = vital_mismatches(out, o, ExitPoint::Raw, &BTreeSet::new(), tol, false);
    bad.extend(raw_bad);

    let (scols, statics) = read_static_csv(&pre("static.csv")).expect("static table");
    if scols != o.static_columns {
        bad.push(format!("{src}: static columns differ"));
    }
    if statics.len() != o.stays.len() {
        bad.push(format!("{src}: {} static rows, oracle {}", statics.len(), o.stays.len()));
    }
    for ((id, row), s) in statics.iter().zip(&o.stays) {
        for (j, (a, b)) in row.iter().zip(&s.statics).enumerate() {
            let same = match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= tol * b.abs().max(1.0),
                (None, None) => true,
                _ => false,
            };
            if !same || *id != s.stay_id {
                bad.push(format!("{src} stay {id} static {}: got {a:?}, oracle {b:?}", scols[j]));
            }
        }
    }

    let (icols, igrids) = read_intervention_csv(&pre("intervention.csv")).expect("intervention table");
    if icols != o.intervention_columns || igrids.len() != o.stays.len() {
        bad.push(format!("{src}: intervention table shape differs"));
    }
    for (g, s) in igrids.iter().zip(&o.stays) {
        let want: BTreeSet<(usize, &str)> = s.interventions.iter().map(|(t, v)| (*t, v.as_str())).collect();
        let mut got = BTreeSet::new();
        for t in 0..g.n_bins {
            for (j, b) in g.row(t).iter().enumerate() {
                if *b == 1 {
                    got.insert((t, icols[j].as_str()));
                }
            }
        }
        if got != want || g.n_bins != s.n_bins {
            bad.push(format!("{src} stay {}: interventions {got:?}, oracle {want:?}", s.stay_id));
        }
    }

    let raw = |f: &str| stage_file(out, src, ExitPoint::Raw, f);
    let cohort: BTreeSet<i64> = read_first_column(&raw("cohort.csv")).into_iter().collect();
    let want_cohort: BTreeSet<i64> = o.included.iter().chain(&o.missingness_removed).copied().collect();
    if cohort != want_cohort {
        bad.push(format!("{src}: cohort of {} stays, oracle {}", cohort.len(), want_cohort.len()));
    }
    let excluded = read_pairs(&raw("cohort_excluded.csv"));
    let mut want_excluded = o.excluded.clone();
    want_excluded.sort();
    if excluded != want_excluded {
        bad.push(format!("{src}: cohort exclusions differ ({} vs oracle {})", excluded.len(), want_excluded.len()));
    }
    let removed = read_first_column(&pre("missingness_removed.csv"));
    if removed != o.missingness_removed {
        bad.push(format!("{src}: missingness removed {removed:?}, oracle {:?}", o.missingness_removed));
    }

    for t in &o.tasks {
        let path = stage_file(out, src, ExitPoint::Full, &format!("labels_{}.csv", t.task));
        let mut got = read_labels_csv(&path).expect("labels");
        let mut want = t.members.clone();
        got.sort();
        want.sort();
        if got != want {
            let diff: Vec<_> = want.iter().filter(|m| !got.contains(m)).take(5).collect();
            bad.push(format!("{src} {}: {} members, oracle {} (missing e.g. {diff:?})", t.task, got.len(), want.len()));
        }
        let got_ex = read_pairs(&stage_file(out, src, ExitPoint::Full, &format!("excluded_{}.csv", t.task)));
        let mut want_ex = t.excluded.clone();
        want_ex.sort();
        if got_ex != want_ex {
            bad.push(format!("{src} {}: task exclusions differ ({} vs oracle {})", t.task, got_ex.len(), want_ex.len()));
        }
    }
    bad
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    r.records().map(|x| x.unwrap()).collect()
}

pub fn read_first_column(path: &Path) -> Vec<i64> {
    records(path).iter().map(|r| r[0].parse().unwrap()).collect()
}

/// `(stay_id, text)` rows, sorted.
pub fn read_pairs(path: &Path) -> Vec<(i64, String)> {
    let mut v: Vec<(i64, String)> = records(path).iter().map(|r| (r[0].parse().unwrap(), r[1].to_string())).collect();
    v.sort();
    v
}

/// Relative path to bytes of every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn dropped_union(a: &OracleExpectations, b: &OracleExpectations) -> BTreeSet<String> {
    a.dropped_variables.iter().chain(&b.dropped_variables).cloned().collect()
}
