use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Gaussian-mechanism settings for published virtual nodes.
///
/// Sensitivity equals the clip bound, so per-coordinate noise has standard
/// deviation `σ·C` with `σ = √(2 ln(1.25/δ)) / ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    /// `None` (JSON `null` or `"inf"`) disables noise; rows are still clipped.
    #[serde(serialize_with = "ser_epsilon", deserialize_with = "de_epsilon")]
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub clip: f64,
    /// Add noise to training-time publications as well as inference ones.
    pub noise_in_training: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            epsilon: None,
            delta: 1e-4,
            clip: 1.0,
            noise_in_training: true,
        }
    }
}

fn ser_epsilon<S: Serializer>(eps: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match eps {
        Some(e) => s.serialize_f64(*e),
        None => s.serialize_str("inf"),
    }
}

fn de_epsilon<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(e)) => Ok(Some(e)),
        Some(Raw::Text(t)) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(None),
        Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("epsilon `{t}` is not a number or \"inf\""))),
    }
}

impl DpConfig {
    pub fn with_epsilon(epsilon: Option<f64>) -> Self {
        DpConfig {
            epsilon,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0) || e.is_infinite() {
                return Err(format!("epsilon must be positive and finite (or \"inf\"), got {e}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(format!("clip bound must be positive, got {}", self.clip));
        }
        Ok(())
    }

    /// Noise multiplier; `None` when ε is infinite.
    pub fn sigma(&self) -> Option<f64> {
        self.epsilon.map(|e| (2.0 * (1.25 / self.delta).ln()).sqrt() / e)
    }

    /// Per-coordinate noise standard deviation `σ·C`.
    pub fn noise_std(&self) -> Option<f64> {
        self.sigma().map(|s| s * self.clip)
    }

    /// Fresh noise of the given shape, or `None` when ε is infinite.
    pub fn sample_noise(&self, shape: &[usize], rng: &mut impl Rng) -> Option<Tensor> {
        let std = self.noise_std()?;
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Some(Tensor::new(shape.to_vec(), data).expect("positive dims"))
    }
}

/// Clips every row of `v` to norm `C` and, when `noisy`, adds a fresh
/// constant noise leaf. Returns `(clipped, published)`.
pub fn dp_protect(
    tape: &mut Tape,
    v: Var,
    dp: &DpConfig,
    noisy: bool,
    rng: &mut impl Rng,
) -> Result<(Var, Var), TensorError> {
    let clipped = tape.clip_rows(v, dp.clip)?;
    let noise = if noisy { dp.sample_noise(tape.shape(clipped), rng) } else { None };
    let published = match noise {
        Some(n) => {
            let n = tape.constant(n);
            tape.add(clipped, n)?
        }
        None => clipped,
    };
    Ok((clipped, published))
}

/// Tape-free clip-and-noise of a matrix.
pub fn protect_tensor(v: &Tensor, dp: &DpConfig, rng: &mut impl Rng) -> Tensor {
    let c = v.cols();
    let mut data = v.data().to_vec();
    for row in data.chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > dp.clip {
            let s = dp.clip / n;
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
    if let Some(noise) = dp.sample_noise(v.shape(), rng) {
        data.iter_mut().zip(noise.data()).for_each(|(x, e)| *x += e);
    }
    Tensor::new(v.shape().to_vec(), data).expect("same shape")
}
