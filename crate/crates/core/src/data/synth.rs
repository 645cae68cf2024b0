//! Seeded synthetic embedding datasets with planted per-class signal.
//!
//! Every row of a stream for class `y` is `s · u_y + σ · z`, where `u_y` is
//! that stream's unit direction for the class and `z` is standard normal.
//! Directions within a stream are orthonormal, so they are mutually distinct.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::EmbeddingBundle;
use super::manifest::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples_per_class: usize,
    pub d: usize,
    pub num_classes: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub signal_emotion: f64,
    pub signal_text: f64,
    pub signal_image: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 40,
            d: 16,
            num_classes: 6,
            m_min: 2,
            m_max: 4,
            n_min: 2,
            n_max: 5,
            signal_emotion: 4.0,
            signal_text: 4.0,
            signal_image: 0.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.samples_per_class == 0 || self.num_classes == 0 || self.d == 0 {
            return bad("samples_per_class, num_classes and d must be positive".into());
        }
        if self.m_min == 0 || self.m_min > self.m_max {
            return bad(format!("empty patch range {}..={}", self.m_min, self.m_max));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad(format!("empty token range {}..={}", self.n_min, self.n_max));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be positive, got {}", self.noise));
        }
        for s in [self.signal_emotion, self.signal_text, self.signal_image] {
            if !(s >= 0.0) || !s.is_finite() {
                return bad(format!("signal strengths must be finite and >= 0, got {s}"));
            }
        }
        if self.d < self.num_classes {
            return bad(format!(
                "d={} is too small for {} distinct orthonormal class directions",
                self.d, self.num_classes
            ));
        }
        Ok(())
    }

    /// (train, val, test) counts per class, 70/15/15.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.samples_per_class as f64;
        let train = (0.7 * n).round() as usize;
        let val = ((0.15 * n).round() as usize).min(self.samples_per_class - train);
        (train, val, self.samples_per_class - train - val)
    }
}

/// Orthonormal per-class unit vectors for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDirections {
    vectors: Vec<Vec<f64>>,
}

impl ClassDirections {
    /// Gram–Schmidt over Gaussian draws; requires `d >= classes`.
    pub fn random(d: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if d < classes {
            return Err(Error::Config(format!(
                "cannot draw {classes} orthonormal directions in {d} dimensions"
            )));
        }
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while vectors.len() < classes {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for u in &vectors {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                vectors.push(v);
            }
        }
        Ok(Self { vectors })
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Draws `rows` feature rows around `strength · direction` with noise `sigma`.
pub fn planted_rows(
    rows: usize,
    direction: &[f64],
    strength: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let d = direction.len();
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        for &u in direction {
            let z: f64 = rng.sample(StandardNormal);
            data.push(f64::from((strength * u + sigma * z) as f32));
        }
    }
    Tensor::matrix(rows, d, data).expect("positive rows")
}

/// The planted directions used by [`generate_synthetic`] for a config.
#[derive(Debug, Clone)]
pub struct SynthDirections {
    pub image: ClassDirections,
    pub text: ClassDirections,
    pub emotion: ClassDirections,
}

pub fn synth_directions(cfg: &SynthConfig) -> Result<SynthDirections> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(SynthDirections {
        image: ClassDirections::random(cfg.d, cfg.num_classes, &mut rng)?,
        text: ClassDirections::random(cfg.d, cfg.num_classes, &mut rng)?,
        emotion: ClassDirections::random(cfg.d, cfg.num_classes, &mut rng)?,
    })
}

/// Generates a labelled dataset. Values are rounded to single precision so
/// the in-memory dataset equals what a disk round trip would produce.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let dirs = synth_directions(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a_0000_0001);
    let (train, val, _) = cfg.split_counts();
    let mut samples = Vec::with_capacity(cfg.samples_per_class * cfg.num_classes);
    for class in 0..cfg.num_classes {
        for k in 0..cfg.samples_per_class {
            let m = rng.random_range(cfg.m_min..=cfg.m_max);
            let n = rng.random_range(cfg.n_min..=cfg.n_max);
            let image = planted_rows(m, dirs.image.get(class), cfg.signal_image, cfg.noise, &mut rng);
            let text = planted_rows(n, dirs.text.get(class), cfg.signal_text, cfg.noise, &mut rng);
            let emotion =
                planted_rows(m, dirs.emotion.get(class), cfg.signal_emotion, cfg.noise, &mut rng);
            let split = if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            };
            let bundle =
                EmbeddingBundle::new(format!("c{class}_{k:04}"), image, text, emotion, Some(class))?;
            samples.push(Sample { bundle, split });
        }
    }
    Dataset::from_samples(cfg.d, cfg.num_classes, samples)
}
