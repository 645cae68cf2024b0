//! Confusion matrices and the scores derived from them.
//!
//! Undefined ratios (no predictions or no support for a class) count as 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("confusion matrix needs at least one class".into()));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim(
                "confusion",
                format!("{} labels but {} predictions", truth.len(), pred.len()),
            ));
        }
        let mut cm = Self::new(classes)?;
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes == 0 || counts.len() != classes * classes {
            return Err(Error::dim(
                "confusion",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Self { classes, counts })
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Contract(format!(
                "pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        diag as f64 / n as f64
    }

    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.get(k, k), self.col_sum(k))
    }

    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.get(k, k), self.row_sum(k))
    }

    pub fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.classes).map(|k| self.f1(k)).sum::<f64>() / self.classes as f64
    }

    pub fn macro_precision(&self) -> f64 {
        (0..self.classes).map(|k| self.precision(k)).sum::<f64>() / self.classes as f64
    }

    /// Mean per-class recall.
    pub fn balanced_accuracy(&self) -> f64 {
        (0..self.classes).map(|k| self.recall(k)).sum::<f64>() / self.classes as f64
    }

    /// Cohen's kappa; 1 when chance agreement is already total.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let p_o = self.accuracy();
        let p_e: f64 = (0..self.classes)
            .map(|k| self.row_sum(k) as f64 * self.col_sum(k) as f64)
            .sum::<f64>()
            / (n * n);
        if (1.0 - p_e).abs() < f64::EPSILON {
            1.0
        } else {
            (p_o - p_e) / (1.0 - p_e)
        }
    }

    /// Full report; an empty matrix is an error rather than all-zero scores.
    pub fn report(&self, class_names: &[String]) -> Result<MetricsReport> {
        if self.total() == 0 {
            return Err(Error::Contract("no samples to score".into()));
        }
        let per_class = (0..self.classes)
            .map(|k| ClassScores {
                class: class_names.get(k).cloned().unwrap_or_else(|| format!("class_{k}")),
                precision: self.precision(k),
                recall: self.recall(k),
                f1: self.f1(k),
                support: self.row_sum(k),
            })
            .collect();
        Ok(MetricsReport {
            samples: self.total(),
            accuracy: self.accuracy(),
            macro_precision: self.macro_precision(),
            macro_recall: self.balanced_accuracy(),
            macro_f1: self.macro_f1(),
            balanced_accuracy: self.balanced_accuracy(),
            kappa: self.kappa(),
            per_class,
            confusion: self.rows(),
        })
    }
}

/// Agreement between two label sequences over `classes` categories.
pub fn cohens_kappa(a: &[usize], b: &[usize], classes: usize) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Contract("kappa of empty rating sequences".into()));
    }
    Ok(ConfusionMatrix::from_pairs(classes, a, b)?.kappa())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Same value as `macro_recall`, under its other common name.
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub per_class: Vec<ClassScores>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn per_class_f1(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.f1).collect()
    }

    /// Plain-text summary with a per-class table and the confusion matrix.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.per_class.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  precision  recall     f1  support", "class");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>6.4}  {:>5.4}  {:>7}",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "accuracy           {:.4}", self.accuracy);
        let _ = writeln!(out, "macro F1           {:.4}", self.macro_f1);
        let _ = writeln!(out, "macro precision    {:.4}", self.macro_precision);
        let _ = writeln!(out, "macro recall       {:.4}", self.macro_recall);
        let _ = writeln!(out, "balanced accuracy  {:.4}", self.balanced_accuracy);
        let _ = writeln!(out, "kappa              {:.4}", self.kappa);
        let _ = writeln!(out, "samples            {}", self.samples);
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion (rows = true, columns = predicted)");
        for (c, row) in self.per_class.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            let _ = writeln!(out, "{:<width$} {}", c.class, cells.join(""));
        }
        out
    }
}
