//! Pooling, the two-layer classification head, and training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::params::{param_group, Initializer};
use crate::tensor::Tensor;

param_group! {
    pub struct HeadParams => HeadVars {
        w_z1: "W_z1",
        b_z1: "b_z1",
        w_z2: "W_z2",
        b_z2: "b_z2",
    }
}

impl HeadParams {
    /// Hidden layer `input_dim → hidden`, output layer `hidden → classes`.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, init: &mut Initializer) -> Self {
        Self {
            w_z1: init.xavier(input_dim, hidden),
            b_z1: init.bias(hidden),
            w_z2: init.xavier(hidden, classes),
            b_z2: init.bias(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b_z2.numel()
    }
}

/// `relu(x W_z1 + b_z1) W_z2 + b_z2` for a rank-1 input; returns rank-1 logits.
pub fn classify(g: &mut Graph, joint: Var, p: &HeadVars) -> Result<Var> {
    let width = g.value(joint).numel();
    let row = g.reshape(joint, &[1, width])?;
    let z1 = g.matmul(row, p.w_z1)?;
    let z1 = g.add_bias(z1, p.b_z1)?;
    let h = g.relu(z1)?;
    let z2 = g.matmul(h, p.w_z2)?;
    let z2 = g.add_bias(z2, p.b_z2)?;
    let classes = g.value(z2).numel();
    g.reshape(z2, &[classes])
}

/// Sum-pools both m×d streams over patches, concatenates them into a
/// 2d joint vector and classifies it.
pub fn head_forward(g: &mut Graph, image: Var, text: Var, p: &HeadVars) -> Result<Var> {
    let (si, st) = (g.shape(image), g.shape(text));
    let expected = g.shape(p.w_z1)[0];
    if si.len() != 2 || si != st || 2 * si[1] != expected {
        return Err(Error::dim(
            "head",
            format!("image {si:?} and text {st:?} must both be m×{}", expected / 2),
        ));
    }
    let pooled_image = g.sum(image, 0)?;
    let pooled_text = g.sum(text, 0)?;
    let joint = g.concat(pooled_image, pooled_text, 0)?;
    classify(g, joint, p)
}

/// Eager logits and probabilities.
pub fn head(image: &Tensor, text: &Tensor, params: &HeadParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = params.bind_with(&mut g, false)?;
    let i = g.constant(image.clone())?;
    let t = g.constant(text.clone())?;
    let logits = head_forward(&mut g, i, t, &vars)?;
    let logits = g.value(logits).data().to_vec();
    let probs = softmax(&logits);
    Ok((logits, probs))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predict(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Contract("predict on an empty vector".into()));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

fn one_hot(classes: usize, label: usize) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::Contract(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}

/// `-log softmax(logits)[label]`.
pub fn ce_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let target = one_hot(g.value(logits).numel(), label)?;
    g.soft_cross_entropy(logits, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    #[default]
    Ols,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Ols => "ols",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ols" => Ok(LossKind::Ols),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Online label smoothing: per-class soft targets rebuilt each epoch from the
/// average predicted distribution over correctly classified samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsState {
    classes: usize,
    /// Row `y` is the current soft target for true class `y`.
    soft: Vec<f64>,
    accum: Vec<f64>,
    counts: Vec<u64>,
    epsilon: f64,
    /// Weight on the hard-label term.
    weight: f64,
}

impl OlsState {
    /// Soft targets start at `(1 - epsilon)·onehot + epsilon / C`.
    pub fn new(classes: usize, epsilon: f64, weight: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("OLS needs at least one class".into()));
        }
        if !(0.0..=1.0).contains(&epsilon) || !(0.0..=1.0).contains(&weight) {
            return Err(Error::Config(format!(
                "OLS epsilon ({epsilon}) and weight ({weight}) must lie in [0, 1]"
            )));
        }
        let mut soft = vec![epsilon / classes as f64; classes * classes];
        for y in 0..classes {
            soft[y * classes + y] += 1.0 - epsilon;
        }
        Ok(Self {
            classes,
            soft,
            accum: vec![0.0; classes * classes],
            counts: vec![0; classes],
            epsilon,
            weight,
        })
    }

    /// Replaces the soft-target matrix (row-major C×C).
    pub fn with_soft_targets(mut self, soft: Vec<f64>) -> Result<Self> {
        if soft.len() != self.classes * self.classes {
            return Err(Error::dim("ols", "soft target matrix must be C×C"));
        }
        self.soft = soft;
        self.validate()?;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn soft_target(&self, label: usize) -> &[f64] {
        &self.soft[label * self.classes..(label + 1) * self.classes]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn validate(&self) -> Result<()> {
        for y in 0..self.classes {
            let row = self.soft_target(y);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::State(format!(
                    "OLS soft target for class {y} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// The blended target `w·onehot + (1 - w)·S[label]`. Cross entropy is
    /// linear in its target, so a single term against this equals the
    /// weighted sum of the hard and soft terms.
    pub fn target(&self, label: usize) -> Result<Vec<f64>> {
        let hard = one_hot(self.classes, label)?;
        self.validate()?;
        let soft = self.soft_target(label);
        Ok(hard
            .iter()
            .zip(soft)
            .map(|(h, s)| self.weight * h + (1.0 - self.weight) * s)
            .collect())
    }

    pub fn loss(&self, g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
        if g.value(logits).numel() != self.classes {
            return Err(Error::dim(
                "ols",
                format!("{} logits for {} classes", g.value(logits).numel(), self.classes),
            ));
        }
        let target = self.target(label)?;
        g.soft_cross_entropy(logits, &target)
    }

    /// Accumulates `probs` into the soft target of `label` when the prediction is correct.
    pub fn observe(&mut self, probs: &[f64], label: usize) -> Result<()> {
        if probs.len() != self.classes || label >= self.classes {
            return Err(Error::Contract(format!(
                "observe: {} probs, label {label}, {} classes",
                probs.len(),
                self.classes
            )));
        }
        if predict(probs)? == label {
            let row = &mut self.accum[label * self.classes..(label + 1) * self.classes];
            row.iter_mut().zip(probs).for_each(|(a, p)| *a += p);
            self.counts[label] += 1;
        }
        Ok(())
    }

    /// Rows with observations become their mean; the others are kept.
    pub fn epoch_end(&mut self) {
        let c = self.classes;
        for y in 0..c {
            let n = self.counts[y];
            if n > 0 {
                for k in 0..c {
                    self.soft[y * c + k] = self.accum[y * c + k] / n as f64;
                }
            }
        }
        self.accum.iter_mut().for_each(|v| *v = 0.0);
        self.counts.iter_mut().for_each(|v| *v = 0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::Parameters;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_inputs_give_uniform_probs() {
        let p = HeadParams::init(8, 4, 6, &mut Initializer::new(1));
        let (logits, probs) = head(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3, 4]), &p).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!(probs.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn probs_sum_to_one() {
        let p = HeadParams::init(8, 4, 6, &mut Initializer::new(2));
        for s in 0..20 {
            let (_, probs) = head(&random(&[3, 4], s), &random(&[3, 4], s + 100), &p).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_set_head_matches_scalar_oracle() {
        // m=1, d=2, C=2
        let p = HeadParams {
            w_z1: Tensor::matrix(4, 2, vec![0.5, -0.2, 0.1, 0.4, -0.3, 0.8, 0.6, -0.1]).unwrap(),
            b_z1: Tensor::vector(vec![0.05, -0.4]).unwrap(),
            w_z2: Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 0.75]).unwrap(),
            b_z2: Tensor::vector(vec![0.1, -0.1]).unwrap(),
        };
        let img = [0.7, -0.3];
        let txt = [0.2, 0.9];
        let (logits, _) = head(
            &Tensor::matrix(1, 2, img.to_vec()).unwrap(),
            &Tensor::matrix(1, 2, txt.to_vec()).unwrap(),
            &p,
        )
        .unwrap();
        let z = [img[0], img[1], txt[0], txt[1]];
        let w1 = [[0.5, -0.2], [0.1, 0.4], [-0.3, 0.8], [0.6, -0.1]];
        let h: Vec<f64> = (0..2)
            .map(|c| ((0..4).map(|r| z[r] * w1[r][c]).sum::<f64>() + [0.05, -0.4][c]).max(0.0))
            .collect();
        let expect = [
            h[0] * 1.0 + h[1] * 0.25 + 0.1,
            h[0] * -0.5 + h[1] * 0.75 - 0.1,
        ];
        for (a, b) in logits.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_ties_and_errors() {
        assert_eq!(predict(&[0.1, 0.7, 0.2, 0.0, 0.0, 0.0]).unwrap(), 1);
        assert_eq!(predict(&[1.0 / 6.0; 6]).unwrap(), 0);
        assert!(predict(&[]).is_err());
    }

    #[test]
    fn predict_matches_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            // coarse values so ties actually occur
            let v: Vec<f64> = (0..6).map(|_| f64::from(rng.random_range(0..4u8))).collect();
            let max = v.iter().copied().fold(f64::MIN, f64::max);
            let oracle = v.iter().position(|&x| x == max).unwrap();
            assert_eq!(predict(&v).unwrap(), oracle);
        }
    }

    #[test]
    fn ce_on_uniform_is_ln_c() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6])).unwrap();
        let l = ce_loss(&mut g, x, 3).unwrap();
        assert!((g.value(l).data()[0] - 1.791759469228055).abs() < 1e-12);
        assert!(ce_loss(&mut g, x, 6).is_err());
    }

    #[test]
    fn ce_is_zero_when_confident() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![800.0, 0.0, 0.0]).unwrap()).unwrap();
        let l = ce_loss(&mut g, x, 0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn ce_matches_log_sum_exp_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..6);
            let mut g = Graph::new();
            let v = g.param(Tensor::vector(x.clone()).unwrap()).unwrap();
            let l = ce_loss(&mut g, v, label).unwrap();
            g.backward(l).unwrap();
            let max = x.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = x.iter().map(|a| (a - max).exp()).sum();
            let lse = max + z.ln();
            assert!((g.value(l).data()[0] - (lse - x[label])).abs() < 1e-12);
            let grad = g.grad(v).unwrap();
            for k in 0..6 {
                let expect = (x[k] - lse).exp() - if k == label { 1.0 } else { 0.0 };
                assert!((grad.data()[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ols_hard_limit_equals_ce() {
        let state = OlsState::new(6, 0.1, 1.0).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let a = state.loss(&mut g, v, 2).unwrap();
        let b = ce_loss(&mut g, v, 2).unwrap();
        assert_eq!(g.value(a).data()[0].to_bits(), g.value(b).data()[0].to_bits());
    }

    #[test]
    fn ols_mixes_hard_and_soft_terms() {
        let state = OlsState::new(3, 0.3, 0.25).unwrap();
        let x = vec![0.5, -0.5, 1.5];
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(x.clone()).unwrap()).unwrap();
        let l = state.loss(&mut g, v, 1).unwrap();
        let logp: Vec<f64> = softmax(&x).iter().map(|p| p.ln()).collect();
        let hard = -logp[1];
        let soft: f64 = state.soft_target(1).iter().zip(&logp).map(|(q, lp)| -q * lp).sum();
        let expect = 0.25 * hard + 0.75 * soft;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ols_initial_rows_are_smoothed_one_hots() {
        let state = OlsState::new(4, 0.2, 0.5).unwrap();
        for (a, b) in state.soft_target(2).iter().zip([0.05, 0.05, 0.85, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        state.validate().unwrap();
    }

    #[test]
    fn single_correct_observation_becomes_the_target() {
        let mut state = OlsState::new(3, 0.1, 0.5).unwrap();
        let probs = [0.2, 0.7, 0.1];
        state.observe(&probs, 1).unwrap();
        // wrong prediction is ignored
        state.observe(&[0.9, 0.05, 0.05], 2).unwrap();
        state.epoch_end();
        assert_eq!(state.soft_target(1), &probs);
        assert_eq!(state.soft_target(2), OlsState::new(3, 0.1, 0.5).unwrap().soft_target(2));
        assert!(state.counts().iter().all(|&c| c == 0));
        state.validate().unwrap();
    }

    #[test]
    fn invalid_state_rows_are_rejected() {
        let state = OlsState::new(2, 0.1, 0.5).unwrap();
        assert!(matches!(
            state.clone().with_soft_targets(vec![0.5, 0.6, 0.5, 0.5]),
            Err(Error::State(_))
        ));
        assert!(state.with_soft_targets(vec![1.5, -0.5, 0.5, 0.5]).is_err());
        assert!(OlsState::new(2, 1.5, 0.5).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let p = HeadParams::init(6, 3, 4, &mut Initializer::new(8));
        let mut inputs = p.named_tensors();
        inputs.push(("image".into(), random(&[2, 3], 9)));
        inputs.push(("text".into(), random(&[2, 3], 10)));
        let report = grad_check(
            |g, v| {
                let vars = HeadVars {
                    w_z1: v[0],
                    b_z1: v[1],
                    w_z2: v[2],
                    b_z2: v[3],
                };
                let logits = head_forward(g, v[4], v[5], &vars)?;
                ce_loss(g, logits, 1)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }
}
