//! Gated fusion of image patch features with emotion patch features.
//!
//! Both streams are projected through `tanh`, their Hadamard interaction
//! drives a sigmoid gate, and the gate forms a componentwise convex
//! combination of the two projected streams:
//!
//! ```text
//! h_i = tanh(f_i W_i + b_i)        h_e = tanh(f_e W_e + b_e)
//! g   = sigmoid((h_i ⊙ h_e) W_g)
//! f_ei = g ⊙ h_e + (1 - g) ⊙ h_i
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{param_group, Initializer};
use crate::tensor::Tensor;

param_group! {
    pub struct GmfParams => GmfVars {
        w_i: "W_i",
        w_e: "W_e",
        w_g: "W_g",
        b_i: "b_i",
        b_e: "b_e",
    }
}

impl GmfParams {
    pub fn init(d: usize, init: &mut Initializer) -> Self {
        Self {
            w_i: init.xavier(d, d),
            w_e: init.xavier(d, d),
            w_g: init.xavier(d, d),
            b_i: init.bias(d),
            b_e: init.bias(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_i.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmfOutput {
    /// Emotion-aware image features, m×d.
    pub fused: Var,
    /// Gate values in (0, 1), m×d.
    pub gate: Var,
    pub image_hidden: Var,
    pub emotion_hidden: Var,
}

pub fn gmf_forward(g: &mut Graph, f_i: Var, f_e: Var, p: &GmfVars) -> Result<GmfOutput> {
    let d = g.shape(p.b_i)[0];
    let (si, se) = (g.shape(f_i), g.shape(f_e));
    if si.len() != 2 || si != se || si[1] != d {
        return Err(Error::dim(
            "gmf",
            format!("image {si:?} and emotion {se:?} must both be m×{d}"),
        ));
    }
    let xi = g.matmul(f_i, p.w_i)?;
    let xi = g.add_bias(xi, p.b_i)?;
    let image_hidden = g.tanh(xi)?;
    let xe = g.matmul(f_e, p.w_e)?;
    let xe = g.add_bias(xe, p.b_e)?;
    let emotion_hidden = g.tanh(xe)?;

    let interaction = g.hadamard(image_hidden, emotion_hidden)?;
    let pre_gate = g.matmul(interaction, p.w_g)?;
    let gate = g.sigmoid(pre_gate)?;

    let from_emotion = g.hadamard(gate, emotion_hidden)?;
    let keep = g.one_minus(gate)?;
    let from_image = g.hadamard(keep, image_hidden)?;
    let fused = g.add(from_emotion, from_image)?;
    Ok(GmfOutput {
        fused,
        gate,
        image_hidden,
        emotion_hidden,
    })
}

/// Concrete values of one fusion pass.
#[derive(Debug, Clone)]
pub struct GmfTrace {
    pub fused: Tensor,
    pub gate: Tensor,
    pub image_hidden: Tensor,
    pub emotion_hidden: Tensor,
}

/// Evaluates the fusion without tracking gradients.
pub fn gmf(f_i: &Tensor, f_e: &Tensor, params: &GmfParams) -> Result<GmfTrace> {
    let mut g = Graph::new();
    let vars = params.bind_with(&mut g, false)?;
    let fi = g.constant(f_i.clone())?;
    let fe = g.constant(f_e.clone())?;
    let out = gmf_forward(&mut g, fi, fe, &vars)?;
    Ok(GmfTrace {
        fused: g.value(out.fused).clone(),
        gate: g.value(out.gate).clone(),
        image_hidden: g.value(out.image_hidden).clone(),
        emotion_hidden: g.value(out.emotion_hidden).clone(),
    })
}
