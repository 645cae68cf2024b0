//! The full fusion model and its ablation and baseline variants.
//!
//! Every variant maps one bundle to a logit vector through a single graph,
//! so training, evaluation and gradient checks share one code path.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::gca::{gca_forward, GcaParams, GcaVars, ScoreMode};
use crate::gmf::{gmf_forward, GmfParams, GmfVars};
use crate::graph::{Graph, Var};
use crate::head::{classify, head_forward, predict, softmax, HeadParams, HeadVars};
use crate::params::{param_group, BoundParameters, Initializer, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    Full,
    /// GCA over `tanh(f_i W_i + b_i)`; the emotion stream is unused.
    NoEmo,
    /// A linear map of `[f_i ; f_e]` replaces the gated fusion.
    NoGmf,
    /// Parameter-free scaled dot-product co-attention replaces GCA.
    Dca,
    /// Mean-pooled image and text concatenated into the head.
    EarlyFusion,
    TextOnly,
    ImageOnly,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Full,
        VariantKind::NoEmo,
        VariantKind::NoGmf,
        VariantKind::Dca,
        VariantKind::EarlyFusion,
        VariantKind::TextOnly,
        VariantKind::ImageOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoEmo => "no_emo",
            VariantKind::NoGmf => "no_gmf",
            VariantKind::Dca => "dca",
            VariantKind::EarlyFusion => "early_fusion",
            VariantKind::TextOnly => "text_only",
            VariantKind::ImageOnly => "image_only",
        }
    }

    pub fn uses_gca(self) -> bool {
        matches!(self, VariantKind::Full | VariantKind::NoEmo | VariantKind::NoGmf)
    }

    /// Whether the variant produces patch-to-token attention.
    pub fn has_attention(self) -> bool {
        self.uses_gca() || self == VariantKind::Dca
    }

    /// Closed-form parameter count for hidden width `d` and `c` classes.
    pub fn param_count(self, d: usize, c: usize, mode: ScoreMode) -> usize {
        let gca = match mode {
            ScoreMode::Bimodal => 4 * d * d + 4 * d + 2,
            ScoreMode::Literal => 2 * d * d + 4 * d + 2,
        };
        let gmf = 3 * d * d + 2 * d;
        let pooled_head = 2 * d * d + d + d * c + c;
        let single_head = d * d + d + d * c + c;
        match self {
            VariantKind::Full => gmf + gca + pooled_head,
            VariantKind::NoEmo => d * d + d + gca + pooled_head,
            VariantKind::NoGmf => 2 * d * d + d + gca + pooled_head,
            VariantKind::Dca => gmf + pooled_head,
            VariantKind::EarlyFusion => pooled_head,
            VariantKind::TextOnly | VariantKind::ImageOnly => single_head,
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = VariantKind::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

param_group! {
    /// Image-only projection used when the emotion stream is ablated.
    pub struct ProjParams => ProjVars {
        w_i: "W_i",
        b_i: "b_i",
    }
}

param_group! {
    /// Linear map `2d → d` of concatenated image and emotion rows.
    pub struct ConcatParams => ConcatVars {
        w_c: "W_c",
        b_c: "b_c",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: VariantKind,
    pub score_mode: ScoreMode,
    pub d: usize,
    pub num_classes: usize,
}

/// Scalar tensors of a model, grouped by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    pub gmf: Option<GmfParams>,
    pub proj: Option<ProjParams>,
    pub concat: Option<ConcatParams>,
    pub gca: Option<GcaParams>,
    pub head: HeadParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    spec: ModelSpec,
    pub gmf: Option<GmfVars>,
    pub proj: Option<ProjVars>,
    pub concat: Option<ConcatVars>,
    pub gca: Option<GcaVars>,
    pub head: HeadVars,
}

impl ModelParams {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.d == 0 || spec.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs d > 0 and at least 2 classes, got d={} C={}",
                spec.d, spec.num_classes
            )));
        }
        let (d, c) = (spec.d, spec.num_classes);
        let mut init = Initializer::new(seed);
        let v = spec.variant;
        let gmf = matches!(v, VariantKind::Full | VariantKind::Dca).then(|| GmfParams::init(d, &mut init));
        let proj = (v == VariantKind::NoEmo).then(|| ProjParams {
            w_i: init.xavier(d, d),
            b_i: init.bias(d),
        });
        let concat = (v == VariantKind::NoGmf).then(|| ConcatParams {
            w_c: init.xavier(2 * d, d),
            b_c: init.bias(d),
        });
        let gca = v.uses_gca().then(|| GcaParams::init(d, spec.score_mode, &mut init));
        let input = match v {
            VariantKind::TextOnly | VariantKind::ImageOnly => d,
            _ => 2 * d,
        };
        let head = HeadParams::init(input, d, c, &mut init);
        Ok(Self {
            spec,
            gmf,
            proj,
            concat,
            gca,
            head,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars> {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph, requires_grad: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            spec: self.spec,
            gmf: self.gmf.as_ref().map(|p| p.bind_with(g, requires_grad)).transpose()?,
            proj: self.proj.as_ref().map(|p| p.bind_with(g, requires_grad)).transpose()?,
            concat: self.concat.as_ref().map(|p| p.bind_with(g, requires_grad)).transpose()?,
            gca: self.gca.as_ref().map(|p| p.bind_with(g, requires_grad)).transpose()?,
            head: self.head.bind_with(g, requires_grad)?,
        })
    }

    /// Handles for variables already in a graph, in visit order; the
    /// inverse of [`Parameters::named_tensors`] for gradient checks.
    pub fn vars_from(&self, vars: &[Var]) -> Result<ModelVars> {
        let it = &mut vars.iter().copied();
        let mv = ModelVars {
            spec: self.spec,
            gmf: self.gmf.as_ref().map(|_| GmfParams::vars_from(it)).transpose()?,
            proj: self.proj.as_ref().map(|_| ProjParams::vars_from(it)).transpose()?,
            concat: self.concat.as_ref().map(|_| ConcatParams::vars_from(it)).transpose()?,
            gca: self.gca.as_ref().map(|p| p.vars_from(it)).transpose()?,
            head: HeadParams::vars_from(it)?,
        };
        Ok(mv)
    }

    /// Eager inference on one bundle.
    pub fn predict(&self, bundle: &EmbeddingBundle) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind_with(&mut g, false)?;
        let inputs = InputVars::constants(&mut g, bundle)?;
        let out = forward(&mut g, &vars, inputs)?;
        let logits = g.value(out.logits).data().to_vec();
        let probs = softmax(&logits);
        let pred = predict(&probs)?;
        Ok(Prediction {
            pred,
            probs,
            logits,
            alpha_ei: out.alpha_ei.map(|a| g.value(a).clone()),
            alpha_t: out.alpha_t.map(|a| g.value(a).clone()),
        })
    }

    /// Overwrites each tensor with the same-named entry of `tensors`.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problem = None;
        let mut used = 0;
        self.visit_mut("", &mut |name, t| match lookup.get(name.as_str()) {
            Some(src) if src.shape() == t.shape() => {
                *t = (*src).clone();
                used += 1;
            }
            Some(src) => {
                problem.get_or_insert(Error::dim(
                    "load",
                    format!("{name} has shape {:?}, expected {:?}", src.shape(), t.shape()),
                ));
            }
            None => {
                problem.get_or_insert(Error::Contract(format!("missing tensor {name}")));
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if used != tensors.len() {
            return Err(Error::Contract(format!(
                "{} tensors do not belong to a {} model",
                tensors.len() - used,
                self.spec.variant
            )));
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.gmf.visit(&format!("{prefix}gmf."), f);
        self.proj.visit(&format!("{prefix}proj."), f);
        self.concat.visit(&format!("{prefix}concat."), f);
        self.gca.visit(&format!("{prefix}gca."), f);
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gmf.visit_mut(&format!("{prefix}gmf."), f);
        self.proj.visit_mut(&format!("{prefix}proj."), f);
        self.concat.visit_mut(&format!("{prefix}concat."), f);
        self.gca.visit_mut(&format!("{prefix}gca."), f);
        self.head.visit_mut(&format!("{prefix}head."), f);
    }
}

impl BoundParameters for ModelVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.gmf.visit_vars(&format!("{prefix}gmf."), f);
        self.proj.visit_vars(&format!("{prefix}proj."), f);
        self.concat.visit_vars(&format!("{prefix}concat."), f);
        self.gca.visit_vars(&format!("{prefix}gca."), f);
        self.head.visit_vars(&format!("{prefix}head."), f);
    }
}

/// Graph handles for the three input streams of one bundle.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub image: Var,
    pub text: Var,
    pub emotion: Var,
}

impl InputVars {
    pub fn constants(g: &mut Graph, b: &EmbeddingBundle) -> Result<Self> {
        Self::leaves(g, b, false)
    }

    pub fn leaves(g: &mut Graph, b: &EmbeddingBundle, requires_grad: bool) -> Result<Self> {
        Ok(Self {
            image: g.leaf(b.image.clone(), requires_grad)?,
            text: g.leaf(b.text.clone(), requires_grad)?,
            emotion: g.leaf(b.emotion.clone(), requires_grad)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Rank-1 logits of length C.
    pub logits: Var,
    /// Patch-to-token attention, m×n.
    pub alpha_ei: Option<Var>,
    /// Patch-to-patch attention, m×m.
    pub alpha_t: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pred: usize,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub alpha_ei: Option<Tensor>,
    pub alpha_t: Option<Tensor>,
}

fn check_inputs(g: &Graph, spec: &ModelSpec, x: &InputVars) -> Result<()> {
    let d = spec.d;
    let (si, st, se) = (g.shape(x.image), g.shape(x.text), g.shape(x.emotion));
    if si.len() != 2 || st.len() != 2 || si[1] != d || st[1] != d || si != se {
        return Err(Error::dim(
            "model",
            format!("inputs image {si:?}, text {st:?}, emotion {se:?} do not fit d={d}"),
        ));
    }
    Ok(())
}

/// Scaled dot-product attention of `queries` over `keys`, both k×d.
fn dot_attention(g: &mut Graph, queries: Var, keys: Var) -> Result<Var> {
    let d = g.shape(queries)[1];
    let kt = g.transpose(keys)?;
    let scores = g.matmul(queries, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    g.softmax(scores, 1)
}

pub fn forward(g: &mut Graph, p: &ModelVars, x: InputVars) -> Result<ForwardOutput> {
    check_inputs(g, &p.spec, &x)?;
    let missing = |what: &str| Error::Contract(format!("{} model is missing its {what} parameters", p.spec.variant));
    let mut alpha_ei = None;
    let mut alpha_t = None;

    let logits = match p.spec.variant {
        VariantKind::Full | VariantKind::NoEmo | VariantKind::NoGmf => {
            let f_ei = match p.spec.variant {
                VariantKind::Full => gmf_forward(g, x.image, x.emotion, &p.gmf.ok_or_else(|| missing("gmf"))?)?.fused,
                VariantKind::NoEmo => {
                    let pr = p.proj.ok_or_else(|| missing("projection"))?;
                    let z = g.matmul(x.image, pr.w_i)?;
                    let z = g.add_bias(z, pr.b_i)?;
                    g.tanh(z)?
                }
                _ => {
                    let c = p.concat.ok_or_else(|| missing("concat"))?;
                    let joint = g.concat(x.image, x.emotion, 1)?;
                    let z = g.matmul(joint, c.w_c)?;
                    g.add_bias(z, c.b_c)?
                }
            };
            let out = gca_forward(g, f_ei, x.text, &p.gca.ok_or_else(|| missing("gca"))?)?;
            alpha_ei = Some(out.alpha_ei);
            alpha_t = Some(out.alpha_t);
            head_forward(g, out.image, out.text, &p.head)?
        }
        VariantKind::Dca => {
            let f_ei = gmf_forward(g, x.image, x.emotion, &p.gmf.ok_or_else(|| missing("gmf"))?)?.fused;
            let a1 = dot_attention(g, f_ei, x.text)?;
            let text = g.matmul(a1, x.text)?;
            let a2 = dot_attention(g, text, f_ei)?;
            let image = g.matmul(a2, f_ei)?;
            alpha_ei = Some(a1);
            alpha_t = Some(a2);
            head_forward(g, image, text, &p.head)?
        }
        VariantKind::EarlyFusion => {
            let i = g.mean(x.image, 0)?;
            let t = g.mean(x.text, 0)?;
            let joint = g.concat(i, t, 0)?;
            classify(g, joint, &p.head)?
        }
        VariantKind::TextOnly => {
            let t = g.mean(x.text, 0)?;
            classify(g, t, &p.head)?
        }
        VariantKind::ImageOnly => {
            let i = g.mean(x.image, 0)?;
            classify(g, i, &p.head)?
        }
    };
    Ok(ForwardOutput {
        logits,
        alpha_ei,
        alpha_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(variant: VariantKind, mode: ScoreMode) -> ModelSpec {
        ModelSpec {
            variant,
            score_mode: mode,
            d: 5,
            num_classes: 3,
        }
    }

    fn random_bundle(m: usize, n: usize, d: usize, seed: u64) -> EmbeddingBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize| {
            Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (i, t, e) = (mat(m), mat(n), mat(m));
        EmbeddingBundle::new("x", i, t, e, Some(0)).unwrap()
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        for mode in [ScoreMode::Bimodal, ScoreMode::Literal] {
            for v in VariantKind::ALL {
                let s = spec(v, mode);
                let p = ModelParams::init(s, 0).unwrap();
                assert_eq!(p.count(), v.param_count(5, 3, mode), "{v} {mode}");
            }
        }
        let full = VariantKind::Full.param_count(768, 6, ScoreMode::Bimodal);
        assert_eq!(full, 9 * 768 * 768 + 7 * 768 + 2 + 768 * 6 + 6);
    }

    #[test]
    fn names_are_prefixed_and_unique() {
        let p = ModelParams::init(spec(VariantKind::Full, ScoreMode::Bimodal), 0).unwrap();
        let names = p.names();
        assert!(names.contains(&"gmf.W_g".to_string()));
        assert!(names.contains(&"gca.U_t".to_string()));
        assert!(names.contains(&"head.b_z2".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantKind::ALL {
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("nope".parse::<VariantKind>().is_err());
    }

    #[test]
    fn every_variant_predicts_a_distribution() {
        let b = random_bundle(3, 4, 5, 1);
        for v in VariantKind::ALL {
            let p = ModelParams::init(spec(v, ScoreMode::Bimodal), 2).unwrap();
            let out = p.predict(&b).unwrap();
            assert_eq!(out.probs.len(), 3);
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(out.alpha_ei.is_some(), v.has_attention());
        }
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let b = random_bundle(2, 2, 4, 1);
        let p = ModelParams::init(spec(VariantKind::Full, ScoreMode::Bimodal), 0).unwrap();
        assert!(matches!(p.predict(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn same_seed_same_weights() {
        let s = spec(VariantKind::Full, ScoreMode::Bimodal);
        let a = ModelParams::init(s, 7).unwrap();
        assert_eq!(a, ModelParams::init(s, 7).unwrap());
        assert_ne!(a.checksum(), ModelParams::init(s, 8).unwrap().checksum());
    }

    #[test]
    fn load_tensors_checks_names_and_shapes() {
        let s = spec(VariantKind::Dca, ScoreMode::Bimodal);
        let src = ModelParams::init(s, 1).unwrap();
        let mut dst = ModelParams::init(s, 2).unwrap();
        dst.load_tensors(&src.named_tensors()).unwrap();
        assert_eq!(dst, src);

        let mut short = src.named_tensors();
        short.pop();
        assert!(dst.load_tensors(&short).is_err());
        let mut extra = src.named_tensors();
        extra.push(("bogus".into(), Tensor::zeros(&[1])));
        assert!(dst.load_tensors(&extra).is_err());
    }

    #[test]
    fn baselines_pass_gradient_check() {
        let b = random_bundle(2, 3, 5, 3);
        for v in [VariantKind::NoEmo, VariantKind::NoGmf, VariantKind::Dca, VariantKind::EarlyFusion] {
            let mut params = ModelParams::init(spec(v, ScoreMode::Bimodal), 4).unwrap();
            // Nonzero biases so relu kinks are unlikely to sit at the probe point.
            params.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|x| *x += 0.05));
            let inputs = params.named_tensors();
            let report = grad_check(
                |g, vars| {
                    let mv = params.vars_from(vars)?;
                    let x = InputVars::constants(g, &b)?;
                    let out = forward(g, &mv, x)?;
                    crate::head::ce_loss(g, out.logits, 1)
                },
                &inputs,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{v}: {}", report.worst());
        }
    }
}
