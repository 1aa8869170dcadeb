//! Classification metrics and report tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    /// Mean F1 over classes that occur in the truth or the predictions.
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub labels: Vec<String>,
    /// Mean wall time per sample for each stage, in milliseconds.
    #[serde(default)]
    pub runtime_ms_per_sample: BTreeMap<String, f64>,
}

/// Builds a report for class indices `0..labels.len()`.
pub fn classification_report(truth: &[usize], pred: &[usize], labels: &[String]) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    let n = labels.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n || p >= n {
            return Err(Error::IndexOutOfRange { index: t.max(p), dims: n });
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let samples = truth.len() as u64;
    let mut per_class = Vec::with_capacity(n);
    let mut f1_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if support > 0 || predicted > 0 {
            f1_sum += f1;
            present += 1;
        }
        per_class.push(ClassMetrics {
            label: labels[c].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(MetricsReport {
        samples,
        accuracy: if samples > 0 { correct as f64 / samples as f64 } else { 0.0 },
        macro_f1: if present > 0 { f1_sum / present as f64 } else { 0.0 },
        per_class,
        confusion,
        labels: labels.to_vec(),
        runtime_ms_per_sample: BTreeMap::new(),
    })
}

impl MetricsReport {
    pub fn recall_of(&self, label: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.label == label).map(|c| c.recall)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let w = self.labels.iter().map(|l| l.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{title}: accuracy {:.4}  macro-F1 {:.4}  ({} samples)", self.accuracy, self.macro_f1, self.samples);
        let _ = writeln!(out, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>8}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            if c.support == 0 && c.precision == 0.0 {
                continue;
            }
            let _ = writeln!(out, "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}", c.label, c.precision, c.recall, c.f1, c.support);
        }
        for (stage, ms) in &self.runtime_ms_per_sample {
            let _ = writeln!(out, "runtime {stage:<20} {ms:>10.4} ms/sample");
        }
        out
    }
}
