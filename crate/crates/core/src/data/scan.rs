use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{dedup_per_patient, parse_kermany_name, split_per_class, DatasetManifest, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// How file names are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `CLASS-PATIENT-INDEX.ext` names; training images deduplicated per
    /// patient.
    Kermany,
    /// Arbitrary file names; the directory gives the class.
    Flat,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kermany" => Ok(Layout::Kermany),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::InvalidArgument(format!(
                "unknown layout {other:?} (expected kermany or flat)"
            ))),
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn class_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Data(format!("non-UTF-8 directory {p:?}")))?
                .to_string();
            out.push((name, p));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no class directories under {dir:?}")));
    }
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn collect(dir: &Path, layout: Layout) -> Result<(Vec<String>, Vec<Sample>)> {
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (class, path) in class_dirs(dir)? {
        for file in sorted_entries(&path)?.into_iter().filter(|p| is_image(p)) {
            let mut s = Sample::new(file, class.clone());
            if layout == Layout::Kermany {
                let k = parse_kermany_name(&s.path)?;
                if k.label != class {
                    return Err(Error::MalformedName {
                        path: s.path,
                        reason: format!("class {:?} does not match directory {class:?}", k.label),
                    });
                }
                s.patient_id = Some(k.patient_id);
                s.image_index = Some(k.image_index);
            }
            samples.push(s);
        }
        classes.push(class);
    }
    Ok((classes, samples))
}

/// Builds a manifest from `root/<class>/*` (split here, per class) or from a
/// pre-split `root/{train,test}/<class>/*` (kept as given).
pub fn prepare_manifest(root: &Path, layout: Layout, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let mut notes = vec![format!(
        "layout {}",
        match layout {
            Layout::Kermany => "kermany",
            Layout::Flat => "flat",
        }
    )];
    let mut manifest = if train_dir.is_dir() && test_dir.is_dir() {
        let (classes, mut train) = collect(&train_dir, layout)?;
        let (test_classes, test) = collect(&test_dir, layout)?;
        if test_classes != classes {
            return Err(Error::Data(format!(
                "train classes {classes:?} differ from test classes {test_classes:?}"
            )));
        }
        notes.push("pre-split train/test directories".into());
        if layout == Layout::Kermany {
            let before = train.len();
            train = dedup_per_patient(&train)?;
            notes.push(format!(
                "train deduplicated per patient: {before} -> {}; test kept whole",
                train.len()
            ));
        }
        let m = DatasetManifest::new(classes, train, test, seed)?;
        if let Some((c, _)) = m.classes().iter().zip(m.counts()).find(|(_, n)| n.0 == 0) {
            return Err(Error::Data(format!("class {c:?} has no training images")));
        }
        m
    } else {
        let (classes, mut samples) = collect(root, layout)?;
        if layout == Layout::Kermany {
            let before = samples.len();
            samples = dedup_per_patient(&samples)?;
            notes.push(format!(
                "deduplicated per patient before splitting: {before} -> {}",
                samples.len()
            ));
        }
        notes.push(format!("per-class split, test fraction {test_fraction}"));
        split_per_class(&samples, &classes, test_fraction, seed)?
    };
    if layout == Layout::Kermany {
        let overlap = patient_overlap(&manifest);
        if overlap > 0 {
            notes.push(format!("{overlap} patients appear in both train and test"));
        }
    }
    manifest.notes = notes;
    Ok(manifest)
}

/// Number of `(label, patient_id)` pairs present in both splits.
pub fn patient_overlap(manifest: &DatasetManifest) -> usize {
    let key = |s: &Sample| s.patient_id.clone().map(|p| (s.label.clone(), p));
    let train: HashSet<_> = manifest.train().iter().filter_map(key).collect();
    let test: HashSet<_> = manifest.test().iter().filter_map(key).collect();
    train.intersection(&test).count()
}
