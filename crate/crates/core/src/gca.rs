//! Gated cross attention between emotion-aware image patches and text tokens.
//!
//! Stage one scores every (patch, token) pair through a sigmoid gate and
//! attends over tokens, giving one attended text vector per patch. Stage two
//! scores every (patch, patch) pair using that attended text and re-attends
//! the image patches:
//!
//! ```text
//! H1[p,j] = sigmoid(f_ei[p] W_ei + f_t[j] U_t + b_ei)     α_ei = softmax_j(H1 w_α_ei + b_α_ei)
//! f̂_t     = α_ei f_t                                        (m×d)
//! H2[p,q] = sigmoid(f̂_t[p] W_t + f_ei[q] U_ei + b_t)      α_t  = softmax_q(H2 w_α_t + b_α_t)
//! f̂_ei    = α_t f_ei                                        (m×d)
//! ```
//!
//! In [`ScoreMode::Literal`] the `U` terms are absent, so each query row is
//! simply repeated along the attended axis. Scores are then constant along
//! that axis and both attentions are uniform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{param_group, BoundParameters, Initializer, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Scores combine the query row with a projection of each attended row.
    #[default]
    Bimodal,
    /// Query rows repeated along the attended axis, no cross projection.
    Literal,
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Bimodal => "bimodal",
            ScoreMode::Literal => "literal",
        })
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimodal" => Ok(ScoreMode::Bimodal),
            "literal" => Ok(ScoreMode::Literal),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

param_group! {
    pub struct GateParams => GateVars {
        w_ei: "W_ei",
        w_t: "W_t",
        w_alpha_ei: "w_alpha_ei",
        w_alpha_t: "w_alpha_t",
        b_ei: "b_ei",
        b_t: "b_t",
        b_alpha_ei: "b_alpha_ei",
        b_alpha_t: "b_alpha_t",
    }
}

param_group! {
    /// Projections of the attended rows used by the bimodal score.
    pub struct CrossParams => CrossVars {
        u_t: "U_t",
        u_ei: "U_ei",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcaParams {
    pub gates: GateParams,
    /// Present exactly in bimodal mode.
    pub cross: Option<CrossParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct GcaVars {
    pub gates: GateVars,
    pub cross: Option<CrossVars>,
}

impl GcaParams {
    pub fn init(d: usize, mode: ScoreMode, init: &mut Initializer) -> Self {
        let gates = GateParams {
            w_ei: init.xavier(d, d),
            w_t: init.xavier(d, d),
            w_alpha_ei: init.xavier(d, 1),
            w_alpha_t: init.xavier(d, 1),
            b_ei: init.bias(d),
            b_t: init.bias(d),
            b_alpha_ei: init.bias(1),
            b_alpha_t: init.bias(1),
        };
        let cross = match mode {
            ScoreMode::Bimodal => Some(CrossParams {
                u_t: init.xavier(d, d),
                u_ei: init.xavier(d, d),
            }),
            ScoreMode::Literal => None,
        };
        Self { gates, cross }
    }

    pub fn score_mode(&self) -> ScoreMode {
        if self.cross.is_some() {
            ScoreMode::Bimodal
        } else {
            ScoreMode::Literal
        }
    }

    pub fn dim(&self) -> usize {
        self.gates.b_ei.numel()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<GcaVars> {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph, requires_grad: bool) -> Result<GcaVars> {
        Ok(GcaVars {
            gates: self.gates.bind_with(g, requires_grad)?,
            cross: self
                .cross
                .as_ref()
                .map(|c| c.bind_with(g, requires_grad))
                .transpose()?,
        })
    }
}

impl GcaParams {
    /// Handles for variables already in a graph, in visit order.
    pub fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<GcaVars> {
        let gates = GateParams::vars_from(vars)?;
        let cross = match self.cross {
            Some(_) => Some(CrossParams::vars_from(vars)?),
            None => None,
        };
        Ok(GcaVars { gates, cross })
    }
}

impl Parameters for GcaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.gates.visit(prefix, f);
        self.cross.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gates.visit_mut(prefix, f);
        self.cross.visit_mut(prefix, f);
    }
}

impl BoundParameters for GcaVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.gates.visit_vars(prefix, f);
        self.cross.visit_vars(prefix, f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GcaOutput {
    /// Re-attended image features f̂_ei, m×d.
    pub image: Var,
    /// Attended text features f̂_t, m×d.
    pub text: Var,
    /// Patch-to-token attention, m×n.
    pub alpha_ei: Var,
    /// Patch-to-patch attention, m×m.
    pub alpha_t: Var,
}

struct ScoreWeights {
    query: Var,
    key: Option<Var>,
    bias: Var,
    w_alpha: Var,
    b_alpha: Var,
}

/// Row-stochastic attention of each query row over the rows of `keys`.
fn gated_attention(g: &mut Graph, queries: Var, keys: Var, w: &ScoreWeights) -> Result<Var> {
    let (m, d) = (g.shape(queries)[0], g.shape(queries)[1]);
    let k = g.shape(keys)[0];
    let q = g.matmul(queries, w.query)?;
    let kv = match w.key {
        Some(u) => g.matmul(keys, u)?,
        None => g.constant(Tensor::zeros(&[k, d]))?,
    };
    let pairs = g.pairwise_add(q, kv)?;
    let pairs = g.add_bias(pairs, w.bias)?;
    let hidden = g.sigmoid(pairs)?;
    let flat = g.reshape(hidden, &[m * k, d])?;
    let scores = g.matmul(flat, w.w_alpha)?;
    let scores = g.add_bias(scores, w.b_alpha)?;
    let scores = g.reshape(scores, &[m, k])?;
    g.softmax(scores, 1)
}

pub fn gca_forward(g: &mut Graph, f_ei: Var, f_t: Var, p: &GcaVars) -> Result<GcaOutput> {
    let d = g.shape(p.gates.b_ei)[0];
    let (si, st) = (g.shape(f_ei).to_vec(), g.shape(f_t).to_vec());
    if si.len() != 2 || st.len() != 2 || si[1] != d || st[1] != d {
        return Err(Error::dim(
            "gca",
            format!("image {si:?} and text {st:?} must be m×{d} and n×{d}"),
        ));
    }
    let stage1 = ScoreWeights {
        query: p.gates.w_ei,
        key: p.cross.map(|c| c.u_t),
        bias: p.gates.b_ei,
        w_alpha: p.gates.w_alpha_ei,
        b_alpha: p.gates.b_alpha_ei,
    };
    let alpha_ei = gated_attention(g, f_ei, f_t, &stage1)?;
    let text = g.matmul(alpha_ei, f_t)?;

    let stage2 = ScoreWeights {
        query: p.gates.w_t,
        key: p.cross.map(|c| c.u_ei),
        bias: p.gates.b_t,
        w_alpha: p.gates.w_alpha_t,
        b_alpha: p.gates.b_alpha_t,
    };
    let alpha_t = gated_attention(g, text, f_ei, &stage2)?;
    let image = g.matmul(alpha_t, f_ei)?;
    Ok(GcaOutput {
        image,
        text,
        alpha_ei,
        alpha_t,
    })
}

#[derive(Debug, Clone)]
pub struct GcaTrace {
    pub image: Tensor,
    pub text: Tensor,
    pub alpha_ei: Tensor,
    pub alpha_t: Tensor,
}

/// Evaluates the cross attention without tracking gradients.
pub fn gca(f_ei: &Tensor, f_t: &Tensor, params: &GcaParams) -> Result<GcaTrace> {
    let mut g = Graph::new();
    let vars = params.bind_with(&mut g, false)?;
    let fe = g.constant(f_ei.clone())?;
    let ft = g.constant(f_t.clone())?;
    let out = gca_forward(&mut g, fe, ft, &vars)?;
    Ok(GcaTrace {
        image: g.value(out.image).clone(),
        text: g.value(out.text).clone(),
        alpha_ei: g.value(out.alpha_ei).clone(),
        alpha_t: g.value(out.alpha_t).clone(),
    })
}
