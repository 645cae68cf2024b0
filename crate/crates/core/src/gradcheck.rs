//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::gca::ScoreMode;
use crate::graph::{Graph, Var};
use crate::head::{ce_loss, LossKind, OlsState};
use crate::model::{forward, InputVars, ModelParams, ModelSpec, VariantKind};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over the tensor.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps` for every entry of every input.
///
/// `f` receives one graph variable per input, in order, and must return a
/// one-element tensor.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor)], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.leaf(t.clone(), track))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok((g, vars, out))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (mut g, vars, out) = eval(&values, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf requires grad"))
        .collect();
    drop(g);

    let scalar = |values: &[Tensor]| -> Result<f64> {
        let (g, _, out) = eval(values, false)?;
        Ok(g.value(out).data()[0])
    };

    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for i in 0..values[k].numel() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + eps;
            let plus = scalar(&values)?;
            values[k].data_mut()[i] = orig - eps;
            let minus = scalar(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[k].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
            worst_index,
            flagged: worst > tol,
        });
    }
    Ok(GradCheckReport { eps, tol, entries })
}

/// Settings for a full-model gradient check on one random sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCheckConfig {
    pub variant: VariantKind,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Full,
            d: 8,
            m: 3,
            n: 4,
            num_classes: 6,
            seed: 0,
            eps: 1e-6,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelCheckRun {
    pub loss: LossKind,
    pub score_mode: ScoreMode,
    pub report: GradCheckReport,
}

/// Checks every parameter gradient of the model for each (loss, score mode)
/// pair. The sample and weights are uniform in (-1, 1); the OLS targets are
/// first moved off their initial values by one observed epoch.
pub fn check_model(
    cfg: &ModelCheckConfig,
    losses: &[LossKind],
    modes: &[ScoreMode],
) -> Result<Vec<ModelCheckRun>> {
    if cfg.m == 0 || cfg.n == 0 {
        return Err(Error::Config("gradient check needs m, n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mat = |rows: usize| -> Result<Tensor> {
        Tensor::matrix(
            rows,
            cfg.d,
            (0..rows * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let (image, text, emotion) = (mat(cfg.m)?, mat(cfg.n)?, mat(cfg.m)?);
    let label = (cfg.seed as usize) % cfg.num_classes.max(1);
    let bundle = EmbeddingBundle::new("gradcheck", image, text, emotion, Some(label))?;

    let mut runs = Vec::new();
    for &score_mode in modes {
        let spec = ModelSpec {
            variant: cfg.variant,
            score_mode,
            d: cfg.d,
            num_classes: cfg.num_classes,
        };
        let mut params = ModelParams::init(spec, cfg.seed)?;
        let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
        params.visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = wrng.random_range(-1.0..1.0));
        });
        let inputs = params.named_tensors();
        for &loss in losses {
            let ols = match loss {
                LossKind::Ce => None,
                LossKind::Ols => {
                    let mut state = OlsState::new(cfg.num_classes, 0.1, 0.5)?;
                    let probs = params.predict(&bundle)?.probs;
                    let pred = crate::head::predict(&probs)?;
                    state.observe(&probs, pred)?;
                    state.epoch_end();
                    Some(state)
                }
            };
            let report = grad_check(
                |g, vars| {
                    let mv = params.vars_from(vars)?;
                    let x = InputVars::constants(g, &bundle)?;
                    let out = forward(g, &mv, x)?;
                    match &ols {
                        Some(state) => state.loss(g, out.logits, label),
                        None => ce_loss(g, out.logits, label),
                    }
                },
                &inputs,
                cfg.eps,
                cfg.tol,
            )?;
            runs.push(ModelCheckRun {
                loss,
                score_mode,
                report,
            });
        }
    }
    Ok(runs)
}
