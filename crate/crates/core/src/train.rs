//! The training loop, batch evaluation and training history.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, EmbeddingBundle, Split};
use crate::error::{Error, Result};
use crate::gca::ScoreMode;
use crate::graph::Graph;
use crate::head::{ce_loss, softmax, LossKind, OlsState};
use crate::metrics::ConfusionMatrix;
use crate::model::{forward, InputVars, ModelParams, ModelSpec, VariantKind};
use crate::optim::{Adam, AdamConfig};
use crate::params::{collect_grads, Gradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    /// Smoothing mass of the initial soft targets.
    pub ols_epsilon: f64,
    /// Weight on the hard-label cross-entropy term.
    pub ols_weight: f64,
    pub score_mode: ScoreMode,
    pub variant: VariantKind,
    pub d: usize,
    pub num_classes: usize,
    /// Re-evaluates the whole train split after every epoch.
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::Ols,
            ols_epsilon: 0.1,
            ols_weight: 0.5,
            score_mode: ScoreMode::Bimodal,
            variant: VariantKind::Full,
            d: 768,
            num_classes: 6,
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            score_mode: self.score_mode,
            d: self.d,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.d == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "batch_size and d must be positive and num_classes at least 2 \
                 (got {}, {}, {})",
                self.batch_size, self.d, self.num_classes
            )));
        }
        OlsState::new(self.num_classes, self.ols_epsilon, self.ols_weight)?;
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.d || data.num_classes() != self.num_classes {
            return Err(Error::Config(format!(
                "config expects d={} with {} classes but the dataset has d={} with {} classes",
                self.d,
                self.num_classes,
                data.d(),
                data.num_classes()
            )));
        }
        Ok(())
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation macro-F1.
    pub best: ModelParams,
    /// Parameters after the final epoch.
    pub last: ModelParams,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub ols: Option<OlsState>,
}

/// Predictions and their confusion matrix over a set of labelled bundles.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

/// Scores `bundles` in parallel; output order follows input order.
pub fn evaluate(params: &ModelParams, bundles: &[&EmbeddingBundle]) -> Result<Evaluation> {
    let spec = params.spec();
    let results = bundles
        .par_iter()
        .map(|b| {
            let label = b.label.ok_or_else(|| {
                Error::Contract(format!("bundle {} has no label to evaluate against", b.id))
            })?;
            let p = params.predict(b)?;
            Ok((label, p))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(spec.num_classes)?;
    let mut predictions = Vec::with_capacity(results.len());
    let mut probs = Vec::with_capacity(results.len());
    for (label, p) in results {
        confusion.add(label, p.pred)?;
        predictions.push(p.pred);
        probs.push(p.probs);
    }
    Ok(Evaluation {
        confusion,
        predictions,
        probs,
    })
}

struct SampleStep {
    loss: f64,
    grads: Gradients,
    probs: Vec<f64>,
    label: usize,
}

fn sample_step(
    params: &ModelParams,
    bundle: &EmbeddingBundle,
    loss: LossKind,
    ols: Option<&OlsState>,
) -> Result<SampleStep> {
    let label = bundle
        .label
        .ok_or_else(|| Error::Contract(format!("training bundle {} has no label", bundle.id)))?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let x = InputVars::constants(&mut g, bundle)?;
    let out = forward(&mut g, &vars, x)?;
    let probs = softmax(g.value(out.logits).data());
    let l = match (loss, ols) {
        (LossKind::Ols, Some(state)) => state.loss(&mut g, out.logits, label)?,
        _ => ce_loss(&mut g, out.logits, label)?,
    };
    g.backward(l)?;
    Ok(SampleStep {
        loss: g.value(l).data()[0],
        grads: collect_grads(&g, &vars),
        probs,
        label,
    })
}

/// Loss and gradients of one sample under the given loss; exposed for
/// gradient checks and tooling.
pub fn sample_loss_and_grads(
    params: &ModelParams,
    bundle: &EmbeddingBundle,
    loss: LossKind,
    ols: Option<&OlsState>,
) -> Result<(f64, Gradients)> {
    let s = sample_step(params, bundle, loss, ols)?;
    Ok((s.loss, s.grads))
}

/// Trains from a fresh seeded initialization.
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let params = ModelParams::init(cfg.model_spec(), cfg.seed)?;
    fit_from(data, cfg, params)
}

/// State visible to an observer at the end of each epoch.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a ModelParams,
    pub ols: Option<&'a OlsState>,
}

/// Trains starting from `params`, which must match the config's model spec.
pub fn fit_from(data: &Dataset, cfg: &TrainConfig, params: ModelParams) -> Result<FitResult> {
    fit_observed(data, cfg, params, &mut |_| {})
}

/// [`fit_from`] with a callback after every epoch's OLS update and validation.
pub fn fit_observed(
    data: &Dataset,
    cfg: &TrainConfig,
    mut params: ModelParams,
    observer: &mut dyn FnMut(EpochView<'_>),
) -> Result<FitResult> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    if params.spec() != cfg.model_spec() {
        return Err(Error::Config(format!(
            "initial parameters {:?} do not match config {:?}",
            params.spec(),
            cfg.model_spec()
        )));
    }
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs nonempty train and val splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }

    let mut ols = match cfg.loss {
        LossKind::Ols => Some(OlsState::new(cfg.num_classes, cfg.ols_epsilon, cfg.ols_weight)?),
        LossKind::Ce => None,
    };
    let mut adam = Adam::new(cfg.adam(), &params)?;
    let mut best = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let batches = batch_indices(train.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut epoch_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let steps = batch
                .par_iter()
                .map(|&i| sample_step(&params, train[i], cfg.loss, ols.as_ref()))
                .collect::<Vec<_>>();
            let mut batch_loss = 0.0;
            let mut sum: Option<Gradients> = None;
            for step in steps {
                let step = step.map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("non-finite value in {op}"),
                    },
                    other => other,
                })?;
                batch_loss += step.loss;
                if let Some(state) = ols.as_mut() {
                    state.observe(&step.probs, step.label)?;
                }
                match sum.as_mut() {
                    None => sum = Some(step.grads),
                    Some(acc) => {
                        for (name, g) in step.grads {
                            let dst = acc[&name].data_mut();
                            dst.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("batch loss is {batch_loss}"),
                });
            }
            let mut grads = sum.expect("batches are nonempty");
            grads
                .values_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
            adam.step(&mut params, &grads).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                },
                other => other,
            })?;
            epoch_loss += batch_loss * n;
        }
        if let Some(state) = ols.as_mut() {
            state.epoch_end();
            state.validate()?;
        }

        let val_eval = evaluate(&params, &val)?;
        let val_macro_f1 = val_eval.confusion.macro_f1();
        let train_accuracy = if cfg.track_train_accuracy {
            Some(evaluate(&params, &train)?.confusion.accuracy())
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_macro_f1,
            val_accuracy: val_eval.confusion.accuracy(),
            train_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val F1 {:.4} val acc {:.4}",
            record.train_loss,
            record.val_macro_f1,
            record.val_accuracy
        );
        observer(EpochView {
            record: &record,
            params: &params,
            ols: ols.as_ref(),
        });
        history.push(record);
        if val_macro_f1 > best_f1 {
            best_f1 = val_macro_f1;
            best_epoch = epoch;
            best = params.clone();
        }
    }

    Ok(FitResult {
        best,
        last: params,
        best_epoch,
        history,
        ols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::params::Parameters;

    fn tiny() -> (Dataset, TrainConfig) {
        let data = crate::data::generate_synthetic(&SynthConfig {
            samples_per_class: 7,
            d: 6,
            num_classes: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            d: 6,
            num_classes: 3,
            epochs: 3,
            batch_size: 4,
            lr: 1e-2,
            ..Default::default()
        };
        (data, cfg)
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (data, cfg) = tiny();
        let cfg = TrainConfig { epochs: 0, ..cfg };
        let out = fit(&data, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.last, ModelParams::init(cfg.model_spec(), cfg.seed).unwrap());
    }

    #[test]
    fn deterministic_history_and_parameters() {
        let (data, cfg) = tiny();
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.checksum(), b.last.checksum());
        assert_eq!(a.best.checksum(), b.best.checksum());
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let (data, cfg) = tiny();
        let cfg = TrainConfig { d: 7, ..cfg };
        assert!(matches!(fit(&data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn huge_inputs_trip_the_divergence_guard() {
        let (mut data, cfg) = tiny();
        for s in &mut data.samples {
            s.bundle.image.data_mut().iter_mut().for_each(|v| *v = f64::MAX / 2.0);
            s.bundle.emotion.data_mut().iter_mut().for_each(|v| *v = f64::MAX / 2.0);
        }
        let cfg = TrainConfig {
            variant: VariantKind::NoGmf,
            ..cfg
        };
        assert!(matches!(fit(&data, &cfg), Err(Error::Diverged { epoch: 1, .. })));
    }

    #[test]
    fn history_lines_have_the_expected_keys() {
        let (data, cfg) = tiny();
        let out = fit(&data, &TrainConfig { epochs: 1, ..cfg }).unwrap();
        let text = history_jsonl(&out.history).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "train_loss", "val_macro_f1", "val_accuracy"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn unlabelled_bundles_cannot_be_evaluated() {
        let (data, cfg) = tiny();
        let params = ModelParams::init(cfg.model_spec(), 0).unwrap();
        let mut b = data.samples[0].bundle.clone();
        b.label = None;
        assert!(evaluate(&params, &[&b]).is_err());
    }
}
