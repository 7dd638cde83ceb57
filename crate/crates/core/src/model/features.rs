use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::InterventionGrid;
use crate::timeseries::VitalGrid;

/// Ordered feature names: static block, then per bin the vital values and
/// (unless dropped) their indicators, then per bin the intervention bits.
pub fn feature_names(
    static_ids: &[String],
    vital_ids: &[String],
    intervention_ids: &[String],
    n_bins: usize,
    with_indicators: bool,
) -> Vec<String> {
    let mut names = static_ids.to_vec();
    for t in 0..n_bins {
        names.extend(vital_ids.iter().map(|v| format!("{v}@{t}")));
        if with_indicators {
            names.extend(vital_ids.iter().map(|v| format!("{v}_ind@{t}")));
        }
    }
    for t in 0..n_bins {
        names.extend(intervention_ids.iter().map(|v| format!("{v}@{t}")));
    }
    names
}

/// Hex SHA-256 of the newline-joined feature names.
pub fn fingerprint(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn feature_count(n_static: usize, n_vitals: usize, n_interventions: usize, n_bins: usize, with_indicators: bool) -> usize {
    n_static + n_bins * (n_vitals * if with_indicators { 2 } else { 1 } + n_interventions)
}

/// Flatten one stay. Grids must already be truncated to `n_bins`; absent
/// values become 0.
pub fn flatten_features(
    statics: &[Option<f64>],
    vitals: &VitalGrid,
    interventions: &InterventionGrid,
    n_bins: usize,
    with_indicators: bool,
    out: &mut Vec<f64>,
) -> Result<()> {
    if vitals.n_bins != n_bins || interventions.n_bins != n_bins {
        return Err(Error::Invalid(format!(
            "stay {}: expected {n_bins} bins, found {} vital and {} intervention bins",
            vitals.stay_id, vitals.n_bins, interventions.n_bins
        )));
    }
    out.extend(statics.iter().map(|v| v.unwrap_or(0.0)));
    for t in 0..n_bins {
        let row = vitals.row(t);
        out.extend(row.iter().map(|c| c.value.unwrap_or(0.0)));
        if with_indicators {
            out.extend(row.iter().map(|c| f64::from(u8::from(c.indicator))));
        }
    }
    for t in 0..n_bins {
        out.extend(interventions.row(t).iter().map(|&b| f64::from(b)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::HourlyCell;

    #[test]
    fn full_registry_lengths() {
        assert_eq!(feature_count(35, 92, 16, 48, true), 9635);
        assert_eq!(feature_count(35, 92, 16, 48, false), 5219);
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        assert_eq!(feature_names(&ids("s", 35), &ids("v", 92), &ids("i", 16), 48, true).len(), 9635);
    }

    #[test]
    fn flatten_order_and_zeros() {
        let mut g = VitalGrid::empty(1, 2, vec!["a".into(), "b".into()]);
        *g.cell_mut(1, 0) = HourlyCell { value: Some(3.0), indicator: true };
        let iv = InterventionGrid { stay_id: 1, n_bins: 2, n_vars: 1, cells: vec![0, 1] };
        let mut x = Vec::new();
        flatten_features(&[Some(5.0), None], &g, &iv, 2, true, &mut x).unwrap();
        assert_eq!(x, vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let names = feature_names(&["s1".into(), "s2".into()], &g.columns, &["iv".into()], 2, true);
        assert_eq!(names[6], "a@1");
        assert_eq!(names[8], "a_ind@1");
        assert_eq!(names[11], "iv@1");
        assert!(flatten_features(&[], &g, &iv, 3, true, &mut x).is_err());
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = vec!["x".to_string(), "y".to_string()];
        let b = vec!["y".to_string(), "x".to_string()];
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 64);
    }
}
