//! Adam with bias correction over named parameter groups.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &impl Parameters) -> Result<Self> {
        cfg.validate()?;
        let mut moments = IndexMap::new();
        params.visit("", &mut |name, t| {
            let zeros = vec![0.0; t.numel()];
            moments.insert(
                name,
                Moments {
                    m: zeros.clone(),
                    v: zeros,
                },
            );
        });
        Ok(Self { cfg, t: 0, moments })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Every parameter must have a gradient of matching size;
    /// on error no parameter is modified.
    pub fn step(&mut self, params: &mut impl Parameters, grads: &Gradients) -> Result<()> {
        let mut problem = None;
        params.visit("", &mut |name, t| {
            if problem.is_some() {
                return;
            }
            problem = match grads.get(&name) {
                None => Some(Error::Contract(format!("no gradient for parameter {name}"))),
                Some(g) if g.numel() != t.numel() => Some(Error::dim(
                    "adam",
                    format!("gradient for {name} has {} values, parameter has {}", g.numel(), t.numel()),
                )),
                Some(g) if !g.is_finite() => Some(Error::NonFinite { op: "adam" }),
                Some(_) if !self.moments.contains_key(&name) => {
                    Some(Error::Contract(format!("parameter {name} was not registered")))
                }
                Some(_) => None,
            };
        });
        if let Some(e) = problem {
            return Err(e);
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p| {
            let g = grads[&name].data();
            let mo = moments.get_mut(&name).expect("checked above");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
#[allow(dead_code)]
mod tests {
    use super::*;
    use crate::params::param_group;
    use crate::tensor::Tensor;

    param_group! {
        pub struct One => OneVars { x: "x" }
    }

    fn one(x: f64) -> One {
        One {
            x: Tensor::vector(vec![x]).unwrap(),
        }
    }

    fn grad_of(p: &One) -> Gradients {
        let x = p.x.data()[0];
        [("x".to_string(), Tensor::vector(vec![2.0 * x]).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        let g = [("x".to_string(), Tensor::zeros(&[1]))].into_iter().collect();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.x.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = one(3.0);
        let mut opt = Adam::new(cfg, &p).unwrap();
        let g = grad_of(&p);
        opt.step(&mut p, &g).unwrap();
        assert!((p.x.data()[0] - (3.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn three_steps_on_a_parabola() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let mut p = one(1.0);
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut opt = Adam::new(cfg, &p).unwrap();
        for want in expected {
            let g = grad_of(&p);
            opt.step(&mut p, &g).unwrap();
            assert!((p.x.data()[0] - want).abs() < 1e-15);
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = one(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
        let err = opt.step(&mut p, &Gradients::new()).unwrap_err();
        assert!(matches!(&err, Error::Contract(msg) if msg.contains('x')));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rejects_bad_config() {
        let p = one(0.0);
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &p).is_err());
        assert!(Adam::new(AdamConfig { beta2: 1.0, ..Default::default() }, &p).is_err());
    }
}
