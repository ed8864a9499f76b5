use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::vna::DpConfig;

/// A linear publication `y = W·x + noise` with its Lipschitz constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzCertificate {
    pub w: DMatrix<f64>,
    /// Largest singular value of `w`.
    pub lipschitz: f64,
}

impl LipschitzCertificate {
    pub fn new(w: DMatrix<f64>) -> Self {
        let lipschitz = w.singular_values().max();
        LipschitzCertificate { w, lipschitz }
    }
}

/// Relative slack granted to the inequality for rounding.
const SLACK: f64 = 1e-9;

/// Reconstructs `x` from `W·x + noise` with the minimum-norm least-squares
/// solution. Returns `(‖x − x*‖, ‖noise‖ / L)`, or `None` when the noisy
/// system is inconsistent and no exact preimage exists.
pub fn bound_trial(cert: &LipschitzCertificate, x: &DVector<f64>, noise: &DVector<f64>) -> Option<(f64, f64)> {
    let y = &cert.w * x + noise;
    let pinv = cert.w.clone().pseudo_inverse(1e-12).ok()?;
    let x_star = pinv * &y;
    let residual = (&cert.w * &x_star - &y).norm();
    if residual > 1e-8 * y.norm().max(1.0) {
        return None;
    }
    Some(((x - x_star).norm(), noise.norm() / cert.lipschitz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub held: usize,
    /// Trials skipped because the system had no exact preimage.
    pub skipped: usize,
    pub pass_rate: f64,
    pub worst_ratio: f64,
}

/// Checks `‖x − x*‖ ≥ ‖noise‖ / L` on random square systems with
/// calibrated Gaussian noise.
pub fn bound_check(trials: usize, dim: usize, dp: &DpConfig, rng: &mut impl Rng) -> Result<BoundReport, AttackError> {
    let std = dp
        .noise_std()
        .ok_or_else(|| AttackError::Config("the bound needs a finite epsilon".into()))?;
    let normal = Normal::new(0.0, std).map_err(|e| AttackError::Config(e.to_string()))?;
    let (mut held, mut skipped, mut worst) = (0, 0, f64::INFINITY);
    for _ in 0..trials {
        let w = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        let cert = LipschitzCertificate::new(w);
        let x = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let noise = DVector::from_fn(dim, |_, _| normal.sample(rng));
        match bound_trial(&cert, &x, &noise) {
            None => skipped += 1,
            Some((dev, bound)) => {
                if bound > 0.0 {
                    worst = worst.min(dev / bound);
                }
                if dev >= bound * (1.0 - SLACK) {
                    held += 1;
                }
            }
        }
    }
    let counted = trials - skipped;
    Ok(BoundReport {
        trials,
        held,
        skipped,
        pass_rate: if counted == 0 { 0.0 } else { held as f64 / counted as f64 },
        worst_ratio: worst,
    })
}
