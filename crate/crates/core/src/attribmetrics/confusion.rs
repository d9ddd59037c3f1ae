//! Confusion matrix with class-wise precision, recall and F1.

use std::path::Path;

use serde::Serialize;

use super::write_csv;
use crate::error::{Error, Result};

/// K×K counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!(
                "confusion matrix rows must all have {k} entries"
            )));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::InvalidArgument(format!(
                "label pair ({truth}, {predicted}) outside {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Element-wise sum, e.g. over the five fold models.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!(
                "merging {}-class into {}-class matrix",
                other.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Undefined precision or recall (empty column or row) is excluded from
    /// the macro means; F1 needs both.
    pub fn metrics(&self) -> Metrics {
        let per_class: Vec<ClassMetrics> = (0..self.k)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let (col, row) = (self.col_sum(c), self.row_sum(c));
                let precision = (col > 0).then(|| tp / col as f64);
                let recall = (row > 0).then(|| tp / row as f64);
                let f1 = match (precision, recall) {
                    (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                    (Some(_), Some(_)) => Some(0.0),
                    _ => None,
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: row,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = per_class.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let total = self.total();
        Metrics {
            accuracy: (total > 0)
                .then(|| (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
        }
    }
}

#[derive(Serialize)]
struct MetricRow<'a> {
    class: &'a str,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    support: u64,
}

/// Matrix as `true,<class...>` rows plus a metrics table with a trailing
/// macro row.
pub fn write_confusion_csv(
    matrix_path: &Path,
    metrics_path: &Path,
    m: &ConfusionMatrix,
    names: &[&str],
) -> Result<()> {
    if names.len() != m.k {
        return Err(Error::Shape(format!(
            "{} class names for {} classes",
            names.len(),
            m.k
        )));
    }
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(m.k + 1);
    rows.push(
        std::iter::once("true".to_string())
            .chain(names.iter().map(|s| s.to_string()))
            .collect(),
    );
    for (i, name) in names.iter().enumerate() {
        rows.push(
            std::iter::once(name.to_string())
                .chain((0..m.k).map(|j| m.get(i, j).to_string()))
                .collect(),
        );
    }
    write_csv(matrix_path, None::<&[&str]>, rows.iter())?;

    let met = m.metrics();
    let mut out: Vec<MetricRow> = names
        .iter()
        .zip(&met.per_class)
        .map(|(n, c)| MetricRow {
            class: n,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            support: c.support,
        })
        .collect();
    out.push(MetricRow {
        class: "macro",
        precision: met.macro_precision,
        recall: met.macro_recall,
        f1: met.macro_f1,
        support: m.total(),
    });
    super::write_serialized(metrics_path, &out)
}
