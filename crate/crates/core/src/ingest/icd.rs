use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcdVersion {
    #[serde(rename = "icd9")]
    Icd9,
    #[serde(rename = "icd10")]
    Icd10,
}

impl IcdVersion {
    pub fn from_number(v: &str) -> Option<Self> {
        match v.trim() {
            "9" => Some(IcdVersion::Icd9),
            "10" => Some(IcdVersion::Icd10),
            _ => None,
        }
    }
}

/// Dotless, upper-cased form of a diagnosis code used for prefix matching.
///
/// The version does not change the normalization; it is carried so callers
/// match against the right prefix set.
pub fn normalize_icd(code: &str, _version: IcdVersion) -> Result<String> {
    let out: String = code
        .trim()
        .chars()
        .filter(|c| *c != '.' && !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyCode);
    }
    Ok(out)
}
