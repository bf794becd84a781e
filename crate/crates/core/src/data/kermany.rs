use std::collections::BTreeMap;
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

/// Components of a `CLASS-PATIENT-INDEX.ext` file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KermanyName {
    pub label: String,
    pub patient_id: String,
    pub image_index: u64,
}

pub fn parse_kermany_name(path: &Path) -> Result<KermanyName> {
    let malformed = |reason: &str| Error::MalformedName {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| malformed("no UTF-8 file name"))?;
    let (stem, ext) = file
        .rsplit_once('.')
        .ok_or_else(|| malformed("missing extension"))?;
    if ext.is_empty() {
        return Err(malformed("missing extension"));
    }
    let parts: Vec<&str> = stem.split('-').collect();
    let [label, patient, index] = parts[..] else {
        return Err(malformed("expected CLASS-PATIENT-INDEX"));
    };
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(malformed("invalid class component"));
    }
    let is_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !is_digits(patient) || !is_digits(index) {
        return Err(malformed("patient and index must be digits"));
    }
    Ok(KermanyName {
        label: label.to_string(),
        patient_id: patient.to_string(),
        image_index: index
            .parse()
            .map_err(|_| malformed("image index out of range"))?,
    })
}

/// Keeps one sample per `(label, patient_id)`: the lowest image index, ties
/// broken by path. Survivors keep their input order.
pub fn dedup_per_patient(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut best: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let pid = s.patient_id.as_deref().ok_or_else(|| {
            Error::Data(format!("sample {:?} has no patient id", s.path))
        })?;
        let key = (s.label.as_str(), pid);
        let rank = |s: &Sample| (s.image_index.unwrap_or(u64::MAX), s.path.clone());
        match best.get(&key) {
            Some(&j) if rank(&samples[j]) <= rank(s) => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}
