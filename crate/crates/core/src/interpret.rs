//! Attention summaries and input-gradient saliency for single predictions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBundle;
use crate::error::Result;
use crate::graph::Graph;
use crate::head::{predict, softmax};
use crate::model::{forward, InputVars, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub pred: usize,
    pub prob: f64,
    /// Column means of the m×m patch-to-patch attention; empty for variants
    /// without attention.
    pub patch_attention: Vec<f64>,
    /// Column means of the m×n patch-to-token attention.
    pub token_attention: Vec<f64>,
    /// Per patch: ‖∂z/∂f_i[p]‖ + ‖∂z/∂f_e[p]‖ for the predicted logit z.
    pub patch_saliency: Vec<f64>,
    /// Per token: ‖∂z/∂f_t[j]‖.
    pub token_saliency: Vec<f64>,
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = (t.rows(), t.cols());
    (0..cols)
        .map(|c| (0..rows).map(|r| t.row(r)[c]).sum::<f64>() / rows as f64)
        .collect()
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub fn explain(params: &ModelParams, bundle: &EmbeddingBundle) -> Result<Explanation> {
    explain_detached(params, bundle, &[])
}

/// Like [`explain`], but no gradient reaches the image or emotion rows of
/// the listed patches, so their saliency is exactly zero.
pub fn explain_detached(
    params: &ModelParams,
    bundle: &EmbeddingBundle,
    detached_patches: &[usize],
) -> Result<Explanation> {
    let mut g = Graph::new();
    let vars = params.bind_with(&mut g, false)?;
    let leaves = InputVars::leaves(&mut g, bundle, true)?;
    let inputs = InputVars {
        image: g.stop_gradient_rows(leaves.image, detached_patches)?,
        text: leaves.text,
        emotion: g.stop_gradient_rows(leaves.emotion, detached_patches)?,
    };
    let out = forward(&mut g, &vars, inputs)?;
    let probs = softmax(g.value(out.logits).data());
    let pred = predict(&probs)?;
    let z = g.select(out.logits, pred)?;
    g.backward(z)?;

    let grad = |v| g.grad(v).expect("input leaves track gradients");
    let gi = row_norms(&grad(leaves.image));
    let ge = row_norms(&grad(leaves.emotion));
    let patch_saliency = gi.iter().zip(&ge).map(|(a, b)| a + b).collect();
    let token_saliency = row_norms(&grad(leaves.text));

    Ok(Explanation {
        id: bundle.id.clone(),
        pred,
        prob: probs[pred],
        patch_attention: out.alpha_t.map(|a| column_means(g.value(a))).unwrap_or_default(),
        token_attention: out.alpha_ei.map(|a| column_means(g.value(a))).unwrap_or_default(),
        patch_saliency,
        token_saliency,
    })
}

/// Explains every bundle in parallel; output order follows input order.
pub fn explain_all(params: &ModelParams, bundles: &[&EmbeddingBundle]) -> Result<Vec<Explanation>> {
    bundles.par_iter().map(|b| explain(params, b)).collect()
}
