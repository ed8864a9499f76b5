use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Role, TimeSeriesPanel};

/// Parameters of the two-party synthetic world.
///
/// Passive series are noisy views of a few spatially smooth latent factors.
/// Each active series mixes its own AR(1) process with `coupling` times a
/// distance-weighted sum of passive signals observed `lag` steps earlier, so
/// the passive history carries information about the active future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_active: usize,
    pub n_passive: usize,
    /// Active steps generated.
    pub steps: usize,
    pub horizon: usize,
    pub coupling: f64,
    /// Steps between a passive signal and its effect on active series.
    /// `None` means equal to the horizon.
    pub lag: Option<usize>,
    /// Passive sampling period as a multiple of the active one.
    pub passive_step_ratio: usize,
    pub active_sampling_minutes: u32,
    pub latent_factors: usize,
    /// AR(1) coefficient of latent and active-private processes.
    pub persistence: f64,
    /// Half-width of the uniform observation noise.
    pub noise: f64,
    /// Side of the square region holding all coordinates.
    pub extent: f64,
    /// Kernel bandwidth linking active series to passive signals.
    pub bandwidth: f64,
    /// Place active series exactly on the first `n_active` passive sites.
    pub coincident: bool,
    /// Offset applied to active coordinates drawn near passive sites.
    pub shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            n_active: 6,
            n_passive: 8,
            steps: 1000,
            horizon: 4,
            coupling: 0.8,
            lag: None,
            passive_step_ratio: 1,
            active_sampling_minutes: 5,
            latent_factors: 3,
            persistence: 0.7,
            noise: 0.1,
            extent: 10.0,
            bandwidth: 1.5,
            coincident: false,
            shift: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn lag(&self) -> usize {
        self.lag.unwrap_or(self.horizon)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_active < 2 || self.n_passive < 2 {
            return bad("need at least 2 active and 2 passive series");
        }
        if self.steps < 2 || self.horizon < 1 || self.steps < self.horizon {
            return bad("steps must be at least 2 and not below the horizon");
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad("coupling must lie in [0, 1]");
        }
        if self.passive_step_ratio == 0 || self.latent_factors == 0 {
            return bad("passive_step_ratio and latent_factors must be positive");
        }
        if self.coincident && self.n_active > self.n_passive {
            return bad("coincident placement needs n_active <= n_passive");
        }
        if !(self.persistence.abs() < 1.0) || self.noise < 0.0 || self.bandwidth <= 0.0 {
            return bad("persistence must be in (-1, 1), noise >= 0, bandwidth > 0");
        }
        Ok(())
    }
}

/// Unit-variance AR(1) path of length `n`.
fn ar1(rng: &mut ChaCha8Rng, n: usize, phi: f64) -> Vec<f64> {
    let innov = Normal::new(0.0, (1.0 - phi * phi).sqrt()).expect("valid std");
    let mut x = Normal::new(0.0, 1.0).expect("valid std").sample(rng);
    (0..n)
        .map(|_| {
            x = phi * x + innov.sample(rng);
            x
        })
        .collect()
}

fn kernel_weights(from: (f64, f64), to: &[(f64, f64)], bandwidth: f64) -> Vec<f64> {
    let w: Vec<f64> = to
        .iter()
        .map(|&(x, y)| {
            let d2 = (x - from.0).powi(2) + (y - from.1).powi(2);
            (-d2 / (2.0 * bandwidth * bandwidth)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|v| v / total).collect()
    } else {
        // far from every site: fall back to the nearest one
        let nearest = to
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (i, (x - from.0).powi(2) + (y - from.1).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(i, _)| i);
        (0..to.len()).map(|i| f64::from(i == nearest)).collect()
    }
}

/// Generates `(active, passive)` panels with two features each; the active
/// party's feature 0 is the prediction target.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
) -> Result<(TimeSeriesPanel, TimeSeriesPanel), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lag = cfg.lag();
    let burn = lag + 1;
    let total = cfg.steps + burn;

    let site = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..cfg.extent), rng.random_range(0.0..cfg.extent));
    let passive_coords: Vec<(f64, f64)> = (0..cfg.n_passive).map(|_| site(&mut rng)).collect();
    let centers: Vec<(f64, f64)> = (0..cfg.latent_factors).map(|_| site(&mut rng)).collect();
    let active_coords: Vec<(f64, f64)> = (0..cfg.n_active)
        .map(|j| {
            if cfg.coincident {
                passive_coords[j]
            } else {
                let anchor = passive_coords[rng.random_range(0..cfg.n_passive)];
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                (anchor.0 + cfg.shift * angle.cos(), anchor.1 + cfg.shift * angle.sin())
            }
        })
        .collect();

    let factors: Vec<Vec<f64>> = (0..cfg.latent_factors)
        .map(|_| ar1(&mut rng, total, cfg.persistence))
        .collect();
    // passive signal i is a kernel mix of the latent factors plus its own AR part
    let passive_signal: Vec<Vec<f64>> = passive_coords
        .iter()
        .map(|&c| {
            let w = kernel_weights(c, &centers, cfg.extent / 3.0);
            let own = ar1(&mut rng, total, cfg.persistence);
            (0..total)
                .map(|t| {
                    let mix: f64 = w.iter().zip(&factors).map(|(wi, f)| wi * f[t]).sum();
                    0.6 * mix + 0.8 * own[t]
                })
                .collect()
        })
        .collect();
    let private: Vec<Vec<f64>> = (0..cfg.n_active)
        .map(|_| ar1(&mut rng, total, cfg.persistence))
        .collect();
    let bandwidth = if cfg.coincident { 1e-3 } else { cfg.bandwidth };
    let links: Vec<Vec<f64>> = active_coords
        .iter()
        .map(|&c| kernel_weights(c, &passive_coords, bandwidth))
        .collect();

    let noise = |rng: &mut ChaCha8Rng| {
        if cfg.noise > 0.0 {
            rng.random_range(-cfg.noise..=cfg.noise)
        } else {
            0.0
        }
    };

    let mut active_values = Vec::with_capacity(cfg.n_active * cfg.steps * 2);
    for j in 0..cfg.n_active {
        for t in burn..total {
            let driven: f64 = links[j]
                .iter()
                .zip(&passive_signal)
                .map(|(w, p)| w * p[t - lag])
                .sum();
            let signal = (1.0 - cfg.coupling) * private[j][t] + cfg.coupling * driven;
            active_values.push(signal + noise(&mut rng));
            active_values.push(private[j][t] + noise(&mut rng));
        }
    }

    let r = cfg.passive_step_ratio;
    let passive_steps = cfg.steps / r;
    let mut passive_values = Vec::with_capacity(cfg.n_passive * passive_steps * 2);
    for sig in &passive_signal {
        for s in 0..passive_steps {
            let t = burn + s * r;
            passive_values.push(sig[t] + noise(&mut rng));
            passive_values.push(sig[t] - sig[t - 1] + noise(&mut rng));
        }
    }

    let active = TimeSeriesPanel {
        party_id: 0,
        role: Role::Active,
        series_ids: (0..cfg.n_active).map(|j| format!("a{j}")).collect(),
        coords: active_coords,
        sampling_minutes: cfg.active_sampling_minutes,
        start_minute: 0,
        n_steps: cfg.steps,
        n_features: 2,
        output_features: vec![0],
        values: active_values,
    };
    let passive = TimeSeriesPanel {
        party_id: 1,
        role: Role::Passive,
        series_ids: (0..cfg.n_passive).map(|i| format!("p{i}")).collect(),
        coords: passive_coords,
        sampling_minutes: cfg.active_sampling_minutes * r as u32,
        start_minute: 0,
        n_steps: passive_steps,
        n_features: 2,
        output_features: vec![],
        values: passive_values,
    };
    Ok((active, passive))
}
