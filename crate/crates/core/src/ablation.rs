//! Multi-seed comparison of model variants on one dataset.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::VariantKind;
use crate::train::{evaluate, fit, TrainConfig};

/// Test-split scores of one trained (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: VariantKind,
    pub seed: u64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantKind,
    pub seeds: usize,
    pub macro_f1_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub macro_f1_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant under every seed and scores the best-validation
/// parameters on the test split. Rows are ordered by (variant, seed) as given.
pub fn run_ablation(
    data: &Dataset,
    base: &TrainConfig,
    variants: &[VariantKind],
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("ablation needs a nonempty test split".into()));
    }
    let jobs: Vec<(VariantKind, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let annotate = |e: Error| Error::Run {
                variant: variant.to_string(),
                seed,
                source: Box::new(e),
            };
            let fitted = fit(data, &cfg).map_err(annotate)?;
            let eval = evaluate(&fitted.best, &test).map_err(annotate)?;
            let cm = &eval.confusion;
            log::info!("ablation {variant} seed {seed}: test macro F1 {:.4}", cm.macro_f1());
            Ok(AblationRun {
                variant,
                seed,
                macro_f1: cm.macro_f1(),
                accuracy: cm.accuracy(),
                per_class_f1: (0..cm.classes()).map(|k| cm.f1(k)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let f1: Vec<f64> = mine.iter().map(|r| r.macro_f1).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.accuracy).collect();
            let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            VariantSummary {
                variant,
                seeds: mine.len(),
                macro_f1_mean,
                macro_f1_std,
                accuracy_mean,
                accuracy_std,
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}

impl AblationReport {
    pub fn summary_for(&self, variant: VariantKind) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<13} {:>5}  {:>17}  {:>17}", "variant", "seeds", "macro F1", "accuracy");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<13} {:>5}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}",
                s.variant.name(),
                s.seeds,
                s.macro_f1_mean,
                s.macro_f1_std,
                s.accuracy_mean,
                s.accuracy_std
            );
        }
        out
    }
}
