use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{parse_kermany_name, Sample};
use crate::error::{Error, Result};

const HEADER: &str = "# roct-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A train/test assignment of samples over an ordered class list.
///
/// Text form: a few `#` header lines (seed, classes, notes) followed by one
/// `path<TAB>label<TAB>split` line per sample, train first.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    classes: Vec<String>,
    train: Vec<Sample>,
    test: Vec<Sample>,
    seed: u64,
    counts: Vec<(usize, usize)>,
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, train: Vec<Sample>, test: Vec<Sample>, seed: u64) -> Result<Self> {
        let train_paths: HashSet<&Path> = train.iter().map(|s| s.path.as_path()).collect();
        if let Some(s) = test.iter().find(|s| train_paths.contains(s.path.as_path())) {
            return Err(Error::Data(format!("{:?} is in both train and test", s.path)));
        }
        for s in train.iter().chain(&test) {
            if !classes.contains(&s.label) {
                return Err(Error::Data(format!(
                    "{:?} has label {:?} outside the class list",
                    s.path, s.label
                )));
            }
        }
        let counts = classes
            .iter()
            .map(|c| {
                (
                    train.iter().filter(|s| &s.label == c).count(),
                    test.iter().filter(|s| &s.label == c).count(),
                )
            })
            .collect();
        Ok(DatasetManifest {
            classes,
            train,
            test,
            seed,
            counts,
            notes: Vec::new(),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(train, test)` counts per class, in class order.
    pub fn counts(&self) -> &[(usize, usize)] {
        &self.counts
    }

    /// Human-readable per-class count table.
    pub fn count_summary(&self) -> String {
        let mut out = String::from("class\ttrain\ttest\n");
        for (c, (tr, te)) in self.classes.iter().zip(&self.counts) {
            let _ = writeln!(out, "{c}\t{tr}\t{te}");
        }
        let (tr, te) = self
            .counts
            .iter()
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        let _ = writeln!(out, "total\t{tr}\t{te}");
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "# seed\t{}", self.seed);
        let _ = writeln!(out, "# classes\t{}", self.classes.join("\t"));
        for n in &self.notes {
            let _ = writeln!(out, "# note\t{n}");
        }
        for (split, samples) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for s in samples {
                let _ = writeln!(out, "{}\t{}\t{}", s.path.display(), s.label, split.as_str());
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Data("not a manifest (missing header)".into()));
        }
        let mut seed = None;
        let mut classes = None;
        let mut notes = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let (key, value) = rest.split_once('\t').unwrap_or((rest, ""));
                match key {
                    "seed" => {
                        seed = Some(value.parse().map_err(|_| {
                            Error::Data(format!("invalid seed {value:?}"))
                        })?)
                    }
                    "classes" => classes = Some(value.split('\t').map(str::to_string).collect::<Vec<_>>()),
                    "note" => notes.push(value.to_string()),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, split] = fields[..] else {
                return Err(Error::Data(format!("manifest line {}: expected 3 fields", no + 2)));
            };
            let path = PathBuf::from(path);
            let mut sample = Sample::new(path, label);
            if let Ok(k) = parse_kermany_name(&sample.path) {
                if k.label == sample.label {
                    sample.patient_id = Some(k.patient_id);
                    sample.image_index = Some(k.image_index);
                }
            }
            match split {
                "train" => train.push(sample),
                "test" => test.push(sample),
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown split {other:?}",
                        no + 2
                    )))
                }
            }
        }
        let classes = classes.ok_or_else(|| Error::Data("manifest has no class list".into()))?;
        let seed = seed.ok_or_else(|| Error::Data("manifest has no seed".into()))?;
        let mut m = DatasetManifest::new(classes, train, test, seed)?;
        m.notes = notes;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
