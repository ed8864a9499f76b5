//! Reconstruction attacks on published virtual nodes and the leakage
//! measures used to compare them.

mod bound;
mod inversion;
mod kmeans;
mod queryfree;

pub use bound::{bound_check, bound_trial, BoundReport, LipschitzCertificate};
pub use inversion::{whitebox_attack, EmbeddingMap, LinearMap, PassiveMap, TargetLevels, WhiteboxConfig};
pub use kmeans::{kmeans, representative_samples};
pub use queryfree::{queryfree_attack, published_targets, QueryFreeConfig};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProtocolError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("attack objective became non-finite after a restart (step {step})")]
    NonFinite { step: usize },
    #[error("surrogate training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    SurrogateDivergence { epoch: usize, batch: usize, loss: f64 },
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    WhiteBox,
    QueryFree,
    Mean,
    RandomGuess,
}

/// Distribution of random-guess reconstructions in scaled space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuessDistribution {
    /// Standard normal.
    #[default]
    Normal,
    /// Uniform on `[-√3, √3]`, which also has unit variance.
    Uniform,
}

/// Reconstruction quality against the true scaled passive windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    #[serde(rename = "infoleak")]
    pub lambda: f64,
    pub mean_distance: f64,
    pub per_sample_distance: Vec<f64>,
    /// Mean absolute error per value, scaled space.
    pub scaled_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guess: Option<GuessDistribution>,
    pub reconstructed: Vec<Tensor>,
}

/// `1 / (1 + d)` for a mean reconstruction distance `d`.
pub fn infoleak_from_distance(mean_distance: f64) -> f64 {
    1.0 / (1.0 + mean_distance)
}

fn distances(truth: &[Tensor], recon: &[Tensor]) -> Vec<f64> {
    assert_eq!(truth.len(), recon.len(), "sample counts differ");
    truth
        .iter()
        .zip(recon)
        .map(|(x, y)| {
            assert_eq!(x.shape(), y.shape(), "sample shapes differ");
            x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .collect()
}

/// InfoLeak of reconstructions: `1 / (1 + mean_i ‖x_i − x*_i‖₂)`.
pub fn infoleak(truth: &[Tensor], recon: &[Tensor]) -> f64 {
    let d = distances(truth, recon);
    infoleak_from_distance(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

impl AttackReport {
    pub fn new(kind: AttackKind, truth: &[Tensor], recon: Vec<Tensor>) -> Self {
        let per_sample_distance = distances(truth, &recon);
        let mean_distance = per_sample_distance.iter().sum::<f64>() / per_sample_distance.len().max(1) as f64;
        let (abs, count) = truth.iter().zip(&recon).fold((0.0, 0usize), |(s, n), (x, y)| {
            (s + x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>(), n + x.len())
        });
        AttackReport {
            kind,
            lambda: infoleak_from_distance(mean_distance),
            mean_distance,
            per_sample_distance,
            scaled_mae: abs / count.max(1) as f64,
            guess: None,
            reconstructed: recon,
        }
    }
}

/// Mean (all zeros in scaled space) or random-guess reconstruction that
/// ignores every published representation.
pub fn baseline_attack(
    kind: AttackKind,
    truth: &[Tensor],
    guess: GuessDistribution,
    rng: &mut impl Rng,
) -> Result<AttackReport, AttackError> {
    let recon: Vec<Tensor> = match kind {
        AttackKind::Mean => truth.iter().map(|x| Tensor::zeros(x.shape())).collect(),
        AttackKind::RandomGuess => truth
            .iter()
            .map(|x| {
                let data = (0..x.len())
                    .map(|_| match guess {
                        GuessDistribution::Normal => StandardNormal.sample(rng),
                        GuessDistribution::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            })
            .collect(),
        other => return Err(AttackError::Config(format!("{other:?} is not a baseline"))),
    };
    let mut report = AttackReport::new(kind, truth, recon);
    if kind == AttackKind::RandomGuess {
        report.guess = Some(guess);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
