//! Per-party private models: recurrent temporal encoder, diffusion spatial
//! layers, prediction head, parameter storage, and checkpoints.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Manifest, ManifestEntry};
pub use layers::{Activation, GruCell, Linear, PredictionHead, SpatialLayer, TemporalStack};
pub use params::{Bound, ParamId, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PartyBatch;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Architecture shared by every party's local stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            temporal_layers: 2,
            spatial_layers: 2,
            activation: Activation::Relu,
        }
    }
}

/// Gaussian-kernel graph over one party's sites: weights
/// `exp(-(d/σ)²)` with σ the median pairwise distance, entries below 0.1
/// dropped, rows normalized to sum to 1.
pub fn gaussian_adjacency(coords: &[(f64, f64)]) -> Tensor {
    let n = coords.len();
    let dist = |i: usize, j: usize| {
        let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
        (dx * dx + dy * dy).sqrt()
    };
    let mut pairwise: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect();
    pairwise.sort_by(f64::total_cmp);
    let sigma = match pairwise.len() {
        0 => 1.0,
        m if m % 2 == 1 => pairwise[m / 2],
        m => 0.5 * (pairwise[m / 2 - 1] + pairwise[m / 2]),
    };
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let w = (-(dist(i, j) / sigma).powi(2)).exp();
            data[i * n + j] = if w >= 0.1 { w } else { 0.0 };
        }
        let total: f64 = data[i * n..(i + 1) * n].iter().sum();
        data[i * n..(i + 1) * n].iter_mut().for_each(|w| *w /= total);
    }
    Tensor::new(vec![n, n], data).expect("at least one site")
}

/// One party's private spatiotemporal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub temporal: TemporalStack,
    pub spatial: Vec<SpatialLayer>,
    pub head: Option<PredictionHead>,
    /// Row-normalized `[N, N]` intra-party graph.
    pub adjacency: Tensor,
    pub width: usize,
}

impl LocalModel {
    /// Registers parameters in `store`. `head_out` is `Some(horizon·F_out)`
    /// for the active party.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        coords: &[(f64, f64)],
        n_features: usize,
        head_out: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let temporal = TemporalStack::new(store, n_features, cfg.hidden, cfg.temporal_layers, rng);
        let spatial = (0..cfg.spatial_layers)
            .map(|m| SpatialLayer::new(store, &format!("spatial{m}"), cfg.hidden, cfg.activation, rng))
            .collect();
        let head = head_out.map(|out| PredictionHead::new(store, cfg.hidden, out, rng));
        LocalModel {
            temporal,
            spatial,
            head,
            adjacency: gaussian_adjacency(coords),
            width: cfg.hidden,
        }
    }

    pub fn n_series(&self) -> usize {
        self.adjacency.rows()
    }

    /// Records a batch's history steps as private input leaves.
    pub fn inputs(tape: &mut Tape, batch: &PartyBatch) -> Vec<Var> {
        batch.steps.iter().map(|s| tape.input(s.clone())).collect()
    }

    pub fn adjacency_var(&self, tape: &mut Tape) -> Result<Var, TensorError> {
        let a = tape.constant(self.adjacency.clone());
        let n = self.n_series();
        tape.reshape(a, &[1, n, n])
    }

    /// Temporal representation `[B, N, H]`.
    pub fn temporal_forward(&self, tape: &mut Tape, p: &Bound, steps: &[Var], batch: usize) -> Result<Var, TensorError> {
        let h = self.temporal.forward(tape, p, steps)?;
        let rows = tape.shape(h)[0];
        if rows != batch * self.n_series() {
            return Err(TensorError::invalid(
                "temporal_forward",
                format!("{rows} rows for batch {batch} of {} series", self.n_series()),
            ));
        }
        tape.reshape(h, &[batch, self.n_series(), self.width])
    }

    pub fn spatial_forward(&self, tape: &mut Tape, p: &Bound, adj: Var, m: usize, h: Var) -> Result<Var, TensorError> {
        self.spatial[m].forward(tape, p, adj, h)
    }

    /// `[h_T, o_1, …, o_{M_s}]`, each `[B, N, H]`.
    pub fn multilevel(&self, tape: &mut Tape, p: &Bound, batch: &PartyBatch) -> Result<Vec<Var>, TensorError> {
        let steps = Self::inputs(tape, batch);
        let adj = self.adjacency_var(tape)?;
        let mut levels = vec![self.temporal_forward(tape, p, &steps, batch.batch)?];
        for m in 0..self.spatial.len() {
            let o = self.spatial_forward(tape, p, adj, m, levels[m])?;
            levels.push(o);
        }
        Ok(levels)
    }

    /// `[B, N, horizon·F_out]` predictions from `[B, N, H]`.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var, TensorError> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| TensorError::invalid("predict", "model has no prediction head"))?;
        head.forward(tape, p, h)
    }
}

#[cfg(test)]
mod tests;
