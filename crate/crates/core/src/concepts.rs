//! Concept maps: the canonical variable registry, comorbidity code-prefix sets,
//! culture-site grouping and unit conversions.
//!
//! All four are plain TOML files carrying a `schema_version`; the defaults ship
//! in `config/` and are embedded at build time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{IcdVersion, Source};

pub const SCHEMA_VERSION: u32 = 1;
pub const OTHER_CULTURE: &str = "other";

const DEFAULT_REGISTRY: &str = include_str!("../config/registry.toml");
const DEFAULT_COMORBIDITIES: &str = include_str!("../config/comorbidities.toml");
const DEFAULT_CULTURE: &str = include_str!("../config/culture_sites.toml");
const DEFAULT_UNITS: &str = include_str!("../config/units.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    NumericVital,
    CultureCategorical,
    Static,
    Intervention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalVariable {
    pub id: String,
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub outlier_low: Option<f64>,
    #[serde(default)]
    pub outlier_high: Option<f64>,
    #[serde(rename = "unit")]
    pub canonical_unit: String,
    #[serde(default)]
    pub mimic_keys: BTreeSet<String>,
    #[serde(default)]
    pub eicu_keys: BTreeSet<String>,
    pub output_position: usize,
    /// Slot whose identity is a documented placeholder.
    #[serde(default)]
    pub reconstruction: bool,
}

impl CanonicalVariable {
    pub fn keys(&self, source: Source) -> &BTreeSet<String> {
        match source {
            Source::MimicLike => &self.mimic_keys,
            Source::EicuLike => &self.eicu_keys,
        }
    }

    /// True when the source has no raw key for this variable at all.
    pub fn absent_in(&self, source: Source) -> bool {
        self.keys(source).is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComorbidityDef {
    pub name: String,
    #[serde(default)]
    pub icd9: Vec<String>,
    #[serde(default)]
    pub icd10: Vec<String>,
}

impl ComorbidityDef {
    /// Prefix match of an already-normalized code.
    pub fn matches(&self, normalized: &str, version: IcdVersion) -> bool {
        let set = match version {
            IcdVersion::Icd9 => &self.icd9,
            IcdVersion::Icd10 => &self.icd10,
        };
        set.iter().any(|p| normalized.starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConversion {
    pub from: String,
    pub to: String,
    pub factor: f64,
    pub offset: f64,
    #[serde(default)]
    pub variables: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    schema_version: u32,
    variable: Vec<CanonicalVariable>,
}

#[derive(Debug, Deserialize)]
struct ConditionSets {
    chf: String,
    copd: String,
}

#[derive(Debug, Deserialize)]
struct ComorbidityFile {
    schema_version: u32,
    conditions: ConditionSets,
    comorbidity: Vec<ComorbidityDef>,
}

#[derive(Debug, Deserialize)]
struct CultureFile {
    schema_version: u32,
    categories: Vec<String>,
    sites: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
struct UnitsFile {
    schema_version: u32,
    #[serde(default)]
    conversion: Vec<UnitConversion>,
}

/// Static feature ids the extractor derives directly; every other static
/// registry entry must name a comorbidity definition.
pub const DERIVED_STATIC_IDS: &[&str] = &[
    "age",
    "gender_male",
    "gender_female",
    "eth_american_indian_alaska_native",
    "eth_asian",
    "eth_hispanic",
    "eth_black_african_american",
    "eth_other_unknown",
    "eth_white",
    "admission_era_year",
    "height_cm",
    "weight_kg",
    "bmi",
    "unit_medical",
    "unit_surgical",
    "unit_cardiac",
    "unit_neuro",
    "unit_other",
];

/// Validated, immutable concept maps shared read-only by every stage.
#[derive(Debug, Clone)]
pub struct ConceptMaps {
    variables: Vec<CanonicalVariable>,
    comorbidities: Vec<ComorbidityDef>,
    chf_set: usize,
    copd_set: usize,
    culture_categories: Vec<String>,
    culture_sites: HashMap<String, String>,
    conversions: Vec<UnitConversion>,
    index: [HashMap<String, usize>; 2],
    by_kind: BTreeMap<VariableKind, Vec<usize>>,
}

/// Raw keys that no canonical variable owns, counted per source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmappedKeys(pub BTreeMap<String, u64>);

impl UnmappedKeys {
    pub fn record(&mut self, key: &str) {
        *self.0.entry(key.to_string()).or_default() += 1;
    }

    pub fn merge(&mut self, other: UnmappedKeys) {
        for (k, n) in other.0 {
            *self.0.entry(k).or_default() += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

fn source_slot(source: Source) -> usize {
    match source {
        Source::MimicLike => 0,
        Source::EicuLike => 1,
    }
}

fn check_version(file: &str, v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{file}: unsupported schema_version {v} (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

fn parse_toml<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{file}: {e}")))
}

pub(crate) fn fold_key(s: &str) -> String {
    s.trim().to_lowercase()
}

impl ConceptMaps {
    /// The shipped defaults.
    pub fn default_maps() -> Self {
        Self::from_texts(DEFAULT_REGISTRY, DEFAULT_COMORBIDITIES, DEFAULT_CULTURE, DEFAULT_UNITS)
            .expect("shipped concept maps are valid")
    }

    /// Load from a directory holding any of `registry.toml`,
    /// `comorbidities.toml`, `culture_sites.toml` and `units.toml`; missing
    /// files fall back to the shipped defaults.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str, default: &'static str| -> Result<String> {
            let p = dir.join(name);
            if p.is_file() {
                std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
            } else {
                Ok(default.to_string())
            }
        };
        Self::from_texts(
            &read("registry.toml", DEFAULT_REGISTRY)?,
            &read("comorbidities.toml", DEFAULT_COMORBIDITIES)?,
            &read("culture_sites.toml", DEFAULT_CULTURE)?,
            &read("units.toml", DEFAULT_UNITS)?,
        )
    }

    pub fn from_texts(registry: &str, comorbidities: &str, culture: &str, units: &str) -> Result<Self> {
        let reg: RegistryFile = parse_toml("registry.toml", registry)?;
        check_version("registry.toml", reg.schema_version)?;
        let com: ComorbidityFile = parse_toml("comorbidities.toml", comorbidities)?;
        check_version("comorbidities.toml", com.schema_version)?;
        let cul: CultureFile = parse_toml("culture_sites.toml", culture)?;
        check_version("culture_sites.toml", cul.schema_version)?;
        let uni: UnitsFile = parse_toml("units.toml", units)?;
        check_version("units.toml", uni.schema_version)?;
        Self::build(reg.variable, com, cul, uni.conversion)
    }

    /// Assemble maps from an explicit variable list and the default
    /// comorbidity, culture and unit tables. Mostly useful in tests.
    pub fn with_variables(variables: Vec<CanonicalVariable>) -> Result<Self> {
        let com: ComorbidityFile = parse_toml("comorbidities.toml", DEFAULT_COMORBIDITIES)?;
        let cul: CultureFile = parse_toml("culture_sites.toml", DEFAULT_CULTURE)?;
        let uni: UnitsFile = parse_toml("units.toml", DEFAULT_UNITS)?;
        Self::build(variables, com, cul, uni.conversion)
    }

    fn build(
        mut variables: Vec<CanonicalVariable>,
        com: ComorbidityFile,
        cul: CultureFile,
        conversions: Vec<UnitConversion>,
    ) -> Result<Self> {
        variables.sort_by(|a, b| (a.kind, a.output_position).cmp(&(b.kind, b.output_position)));

        let mut by_kind: BTreeMap<VariableKind, Vec<usize>> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        let mut index: [HashMap<String, usize>; 2] = Default::default();
        for (i, v) in variables.iter().enumerate() {
            if !ids.insert(v.id.clone()) {
                return Err(Error::Config(format!("duplicate variable id `{}`", v.id)));
            }
            if let (Some(lo), Some(hi)) = (v.outlier_low, v.outlier_high) {
                if !(lo <= hi) {
                    return Err(Error::Config(format!(
                        "variable `{}`: outlier_low {lo} exceeds outlier_high {hi}",
                        v.id
                    )));
                }
            }
            by_kind.entry(v.kind).or_default().push(i);
            for source in [Source::MimicLike, Source::EicuLike] {
                for key in v.keys(source) {
                    let slot = &mut index[source_slot(source)];
                    if let Some(prev) = slot.insert(key.trim().to_string(), i) {
                        return Err(Error::Config(format!(
                            "{source} key `{key}` is owned by both `{}` and `{}`",
                            variables[prev].id, v.id
                        )));
                    }
                }
            }
        }
        for (kind, members) in &by_kind {
            for (expected, &i) in members.iter().enumerate() {
                if variables[i].output_position != expected {
                    return Err(Error::Config(format!(
                        "{kind:?} output positions are not a contiguous 0-based permutation (at `{}`)",
                        variables[i].id
                    )));
                }
            }
        }

        let mut names = BTreeSet::new();
        for d in &com.comorbidity {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate comorbidity `{}`", d.name)));
            }
        }
        let find_set = |name: &str| {
            com.comorbidity
                .iter()
                .position(|d| d.name == name)
                .ok_or_else(|| Error::Config(format!("condition set references unknown comorbidity `{name}`")))
        };
        let chf_set = find_set(&com.conditions.chf)?;
        let copd_set = find_set(&com.conditions.copd)?;
        for &i in by_kind.get(&VariableKind::Static).map(Vec::as_slice).unwrap_or(&[]) {
            let id = variables[i].id.as_str();
            if !DERIVED_STATIC_IDS.contains(&id) && !names.contains(id) {
                return Err(Error::Config(format!(
                    "static variable `{id}` is neither a derived feature nor a comorbidity"
                )));
            }
        }

        let mut cats = BTreeSet::new();
        for c in &cul.categories {
            if c == OTHER_CULTURE || !cats.insert(c.as_str()) {
                return Err(Error::Config(format!("culture category `{c}` is duplicated or reserved")));
            }
        }
        let mut culture_sites = HashMap::new();
        for (site, cat) in &cul.sites {
            if !cats.contains(cat.as_str()) {
                return Err(Error::Config(format!("culture site `{site}` maps to unknown category `{cat}`")));
            }
            culture_sites.insert(fold_key(site), cat.clone());
        }

        for c in &conversions {
            if !c.factor.is_finite() || c.factor == 0.0 || !c.offset.is_finite() {
                return Err(Error::Config(format!(
                    "unit conversion `{}` -> `{}` needs a finite nonzero factor and finite offset",
                    c.from, c.to
                )));
            }
        }

        Ok(ConceptMaps {
            variables,
            comorbidities: com.comorbidity,
            chf_set,
            copd_set,
            culture_categories: cul.categories,
            culture_sites,
            conversions,
            index,
            by_kind,
        })
    }

    pub fn variables(&self) -> &[CanonicalVariable] {
        &self.variables
    }

    /// Variables of one kind, in output-position order.
    pub fn of_kind(&self, kind: VariableKind) -> impl Iterator<Item = &CanonicalVariable> + '_ {
        self.by_kind
            .get(&kind)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.variables[i])
    }

    pub fn vitals(&self) -> Vec<&CanonicalVariable> {
        self.of_kind(VariableKind::NumericVital).collect()
    }

    pub fn interventions(&self) -> Vec<&CanonicalVariable> {
        self.of_kind(VariableKind::Intervention).collect()
    }

    pub fn statics(&self) -> Vec<&CanonicalVariable> {
        self.of_kind(VariableKind::Static).collect()
    }

    pub fn variable(&self, id: &str) -> Option<&CanonicalVariable> {
        self.variables.iter().find(|v| v.id == id)
    }

    /// The unique variable owning `raw_key` under `source`, if any.
    pub fn lookup(&self, source: Source, raw_key: &str) -> Option<&CanonicalVariable> {
        self.index[source_slot(source)]
            .get(raw_key.trim())
            .map(|&i| &self.variables[i])
    }

    pub fn comorbidities(&self) -> &[ComorbidityDef] {
        &self.comorbidities
    }

    pub fn chf_definition(&self) -> &ComorbidityDef {
        &self.comorbidities[self.chf_set]
    }

    pub fn copd_definition(&self) -> &ComorbidityDef {
        &self.comorbidities[self.copd_set]
    }

    pub fn culture_categories(&self) -> &[String] {
        &self.culture_categories
    }

    /// Known raw culture-site strings (folded), sorted.
    pub fn culture_site_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.culture_sites.keys().map(String::as_str).collect();
        keys.sort_unstable();
        keys
    }

    /// Apply the affine conversion from `raw_unit` to the variable's canonical
    /// unit. Returns `None` when no conversion applies (value kept as is).
    pub fn convert_unit(&self, var: &CanonicalVariable, raw_unit: &str, value: f64) -> Option<f64> {
        let from = fold_key(raw_unit);
        if from == fold_key(&var.canonical_unit) {
            return None;
        }
        self.conversions
            .iter()
            .find(|c| {
                fold_key(&c.from) == from
                    && c.to == var.canonical_unit
                    && c.variables.as_ref().is_none_or(|vs| vs.iter().any(|v| v == &var.id))
            })
            .map(|c| value * c.factor + c.offset)
    }
}

/// Registry lookup that counts misses.
pub fn map_item_to_variable<'m>(
    source: Source,
    raw_key: &str,
    maps: &'m ConceptMaps,
    unmapped: &mut UnmappedKeys,
) -> Option<&'m CanonicalVariable> {
    let hit = maps.lookup(source, raw_key);
    if hit.is_none() {
        unmapped.record(raw_key.trim());
    }
    hit
}

/// Culture category for a raw site string; unmapped sites fall back to
/// [`OTHER_CULTURE`].
pub fn map_culture_site<'m>(raw_site: &str, maps: &'m ConceptMaps) -> &'m str {
    maps.culture_sites
        .get(&fold_key(raw_site))
        .map(String::as_str)
        .unwrap_or(OTHER_CULTURE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(id: &str, kind: VariableKind, pos: usize, mimic: &[&str], eicu: &[&str]) -> CanonicalVariable {
        CanonicalVariable {
            id: id.into(),
            name: id.into(),
            kind,
            outlier_low: None,
            outlier_high: None,
            canonical_unit: String::new(),
            mimic_keys: mimic.iter().map(|s| s.to_string()).collect(),
            eicu_keys: eicu.iter().map(|s| s.to_string()).collect(),
            output_position: pos,
            reconstruction: false,
        }
    }

    #[test]
    fn default_registry_shape() {
        let m = ConceptMaps::default_maps();
        let vitals = m.vitals();
        assert_eq!(vitals.len(), 92);
        assert_eq!(vitals.iter().filter(|v| v.eicu_keys.is_empty()).count(), 15);
        assert_eq!(m.interventions().len(), 16);
        assert_eq!(m.statics().len(), 35);
        assert_eq!(m.comorbidities().len(), 17);
        assert_eq!(m.culture_categories().len(), 14);
        for kind in [
            VariableKind::NumericVital,
            VariableKind::Static,
            VariableKind::Intervention,
            VariableKind::CultureCategorical,
        ] {
            let pos: Vec<usize> = m.of_kind(kind).map(|v| v.output_position).collect();
            assert_eq!(pos, (0..pos.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn lookups() {
        let m = ConceptMaps::default_maps();
        let mut unmapped = UnmappedKeys::default();
        let hr = map_item_to_variable(Source::MimicLike, "220045", &m, &mut unmapped).unwrap();
        assert_eq!(hr.id, "heart_rate");
        assert!(map_item_to_variable(Source::MimicLike, "999999", &m, &mut unmapped).is_none());
        assert_eq!(unmapped.total(), 1);
        assert_eq!(m.lookup(Source::EicuLike, "heartrate").unwrap().id, "heart_rate");
    }

    #[test]
    fn eicu_only_key_is_source_specific() {
        let m = ConceptMaps::with_variables(vec![
            var("a", VariableKind::NumericVital, 0, &["1"], &[]),
            var("b", VariableKind::NumericVital, 1, &[], &["B string"]),
        ])
        .unwrap();
        let mut u = UnmappedKeys::default();
        assert_eq!(map_item_to_variable(Source::EicuLike, "B string", &m, &mut u).unwrap().id, "b");
        assert!(map_item_to_variable(Source::MimicLike, "B string", &m, &mut u).is_none());
    }

    #[test]
    fn ownership_does_not_depend_on_registry_order() {
        let base = ConceptMaps::default_maps();
        let mut shuffled: Vec<_> = base.variables().to_vec();
        shuffled.reverse();
        shuffled.rotate_left(37);
        let other = ConceptMaps::with_variables(shuffled).unwrap();
        for v in base.variables() {
            for s in [Source::MimicLike, Source::EicuLike] {
                for k in v.keys(s) {
                    assert_eq!(other.lookup(s, k).unwrap().id, v.id);
                }
            }
        }
    }

    #[test]
    fn rejects_shared_keys_and_gapped_positions() {
        let dup = ConceptMaps::with_variables(vec![
            var("a", VariableKind::NumericVital, 0, &["1"], &[]),
            var("b", VariableKind::NumericVital, 1, &["1"], &[]),
        ]);
        assert!(matches!(dup, Err(Error::Config(_))));
        let gap = ConceptMaps::with_variables(vec![
            var("a", VariableKind::NumericVital, 0, &["1"], &[]),
            var("b", VariableKind::NumericVital, 2, &["2"], &[]),
        ]);
        assert!(matches!(gap, Err(Error::Config(_))));
        let mut bad = var("c", VariableKind::NumericVital, 0, &["3"], &[]);
        bad.outlier_low = Some(5.0);
        bad.outlier_high = Some(1.0);
        assert!(ConceptMaps::with_variables(vec![bad]).is_err());
    }

    #[test]
    fn culture_sites() {
        let m = ConceptMaps::default_maps();
        assert_eq!(map_culture_site("Blood Culture", &m), "blood");
        assert_eq!(map_culture_site("  BLOOD CULTURE   ", &m), "blood");
        assert_eq!(map_culture_site("unicorn horn", &m), OTHER_CULTURE);
    }

    #[test]
    fn unit_conversion() {
        let m = ConceptMaps::default_maps();
        let t = m.variable("temperature").unwrap();
        let c = m.convert_unit(t, "°F", 98.6).unwrap();
        assert!((c - 37.0).abs() < 1e-9);
        assert!(m.convert_unit(t, "°C", 37.0).is_none());
        let ca = m.variable("calcium").unwrap();
        assert!(m.convert_unit(ca, "mmol/L", 2.0).is_none());
        let glu = m.variable("glucose").unwrap();
        assert_eq!(m.convert_unit(glu, "mmol/L", 5.0), Some(90.0));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let r = ConceptMaps::from_texts(
            "schema_version = 2\nvariable = []",
            DEFAULT_COMORBIDITIES,
            DEFAULT_CULTURE,
            DEFAULT_UNITS,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
