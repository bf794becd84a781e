//! Confusion matrices, overall accuracy (mean sensitivity), and
//! count-weighted mean specificity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Metrics(format!("counts must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Metrics(format!("unknown label {label:?}")))
    }

    pub fn accumulate(&mut self, true_label: &str, predicted: &str) -> Result<()> {
        let t = self.index(true_label)?;
        let p = self.index(predicted)?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn accumulate_index(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        let k = self.k();
        if true_class >= k || predicted >= k {
            return Err(Error::Metrics(format!(
                "class index ({true_class}, {predicted}) out of range for {k} classes"
            )));
        }
        self.counts[true_class][predicted] += 1;
        Ok(())
    }

    /// Elementwise sum with another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Metrics("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// `N_C`: samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn column(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.support(c) - self.counts[c][c]
    }

    /// `CFP_C`: column sum minus diagonal.
    pub fn false_positives(&self, c: usize) -> u64 {
        self.column(c) - self.counts[c][c]
    }

    /// `CTN_C`: total − row sum − column sum + diagonal.
    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() + self.counts[c][c] - self.support(c) - self.column(c)
    }

    /// Trace over total; identical to mean sensitivity.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metrics("empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Per-class recall `TP_C / N_C`.
    pub fn sensitivity(&self, c: usize) -> Result<f64> {
        let n = self.support(c);
        if n == 0 {
            return Err(Error::Metrics(format!("class {:?} has no samples", self.classes[c])));
        }
        Ok(self.true_positives(c) as f64 / n as f64)
    }

    /// `CTN_C / (CTN_C + CFP_C)`.
    pub fn specificity(&self, c: usize) -> Result<f64> {
        let tn = self.true_negatives(c);
        let fp = self.false_positives(c);
        if tn + fp == 0 {
            return Err(Error::Metrics(format!(
                "class {:?} has no negative samples",
                self.classes.get(c).map_or("?", |s| s.as_str())
            )));
        }
        Ok(tn as f64 / (tn + fp) as f64)
    }

    /// `Σ_C S_C · N_C / Σ_C N_C`.
    pub fn mean_specificity(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metrics("empty confusion matrix".into()));
        }
        let mut acc = 0.0;
        for c in 0..self.k() {
            acc += self.specificity(c)? * self.support(c) as f64;
        }
        Ok(acc / total as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let acc = self.overall_accuracy()?;
        let per_class_specificity = (0..self.k())
            .map(|c| Ok((self.classes[c].clone(), self.specificity(c)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(MetricsReport {
            overall_accuracy: acc,
            mean_sensitivity: acc,
            per_class_specificity,
            mean_specificity: self.mean_specificity()?,
        })
    }

    /// Header row and column of class names, integer cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub mean_sensitivity: f64,
    pub per_class_specificity: BTreeMap<String, f64>,
    pub mean_specificity: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Four-decimal text summary.
    pub fn display(&self) -> String {
        let mut out = format!(
            "overall accuracy  {:.4}\nmean sensitivity  {:.4}\nmean specificity  {:.4}\n",
            self.overall_accuracy, self.mean_sensitivity, self.mean_specificity
        );
        for (c, s) in &self.per_class_specificity {
            let _ = writeln!(out, "  specificity {c}: {s:.4}");
        }
        out
    }
}

/// Rounds to four decimals, as displayed.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
