//! Virtual node alignment: the passive party's three aggregation schemes,
//! differential-privacy protection of the result, and the active party's
//! gated fusion.

mod dp;

pub use dp::{dp_protect, protect_tensor, DpConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum VnaError {
    #[error("k = {k} must lie in 1..={n_passive}")]
    KOutOfRange { k: usize, n_passive: usize },
    #[error("{0}")]
    Config(String),
}

/// Hyperparameters of one alignment module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VnaConfig {
    pub k: usize,
    pub n_head: usize,
    /// Rank of the adaptive factors.
    pub rank: usize,
}

impl Default for VnaConfig {
    fn default() -> Self {
        VnaConfig { k: 5, n_head: 2, rank: 10 }
    }
}

/// Binary `N^A × N^P` matrix marking, for each active series, the `k`
/// closest passive series. `delta` is `N^P × N^A`; ties go to the lower
/// passive index.
pub fn knn_matrix(delta: &Tensor, k: usize) -> Result<Tensor, VnaError> {
    let (np, na) = (delta.shape()[0], delta.shape()[1]);
    if k == 0 || k > np {
        return Err(VnaError::KOutOfRange { k, n_passive: np });
    }
    let mut out = vec![0.0; na * np];
    for j in 0..na {
        let mut order: Vec<usize> = (0..np).collect();
        // stable sort keeps lower indices first among equal distances
        order.sort_by(|&a, &b| delta.get(&[a, j]).total_cmp(&delta.get(&[b, j])));
        for &i in &order[..k] {
            out[j * np + i] = 1.0;
        }
    }
    Ok(Tensor::new(vec![na, np], out).expect("non-empty"))
}

/// Width used by each attention head.
pub fn head_width(n_passive: usize, n_active: usize, n_head: usize) -> usize {
    (n_passive + n_active).div_ceil(n_head)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Passive-side generator for one alignment level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnaGenerator {
    pub level: usize,
    pub w_dis: Linear,
    pub w_a1: ParamId,
    pub w_a2: ParamId,
    pub w_adp: Linear,
    pub x_zp: ParamId,
    pub x_vp: ParamId,
    pub heads: Vec<AttentionHead>,
    pub w1: Linear,
    pub w2: Linear,
    /// Binary `N^A × N^P` neighbour selection.
    pub knn: Tensor,
    pub d_head: usize,
}

/// Tape handles of one level's virtual-node computation, each `[B, N^A, H]`.
#[derive(Debug, Clone, Copy)]
pub struct VirtualNodes {
    pub dis: Var,
    pub adp: Var,
    pub dyn_: Var,
    pub fused: Var,
    pub clipped: Var,
    pub published: Var,
}

impl VnaGenerator {
    /// `width` is shared by both parties' representations.
    pub fn new(
        store: &mut ParamStore,
        level: usize,
        knn: Tensor,
        width: usize,
        cfg: &VnaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, VnaError> {
        if cfg.n_head == 0 || cfg.rank == 0 {
            return Err(VnaError::Config("n_head and rank must be positive".into()));
        }
        let (na, np) = (knn.shape()[0], knn.shape()[1]);
        let d_head = head_width(np, na, cfg.n_head);
        let name = |s: &str| format!("vna{level}.{s}");
        let heads = (0..cfg.n_head)
            .map(|i| AttentionHead {
                q: Linear::new(store, &name(&format!("head{i}.q")), width, d_head, false, rng),
                k: Linear::new(store, &name(&format!("head{i}.k")), width, d_head, false, rng),
                v: Linear::new(store, &name(&format!("head{i}.v")), width, d_head, false, rng),
            })
            .collect();
        Ok(VnaGenerator {
            level,
            w_dis: Linear::new(store, &name("dis"), width, width, true, rng),
            w_a1: store.uniform(name("a1"), &[np, cfg.rank], cfg.rank, rng),
            w_a2: store.uniform(name("a2"), &[na, cfg.rank], cfg.rank, rng),
            w_adp: Linear::new(store, &name("adp"), width, width, true, rng),
            x_zp: store.uniform(name("pos_passive"), &[np, width], width, rng),
            x_vp: store.uniform(name("pos_virtual"), &[na, width], width, rng),
            heads,
            w1: Linear::new(store, &name("post1"), cfg.n_head * d_head, width, true, rng),
            w2: Linear::new(store, &name("post2"), width, width, true, rng),
            knn,
            d_head,
        })
    }

    pub fn n_active(&self) -> usize {
        self.knn.shape()[0]
    }

    pub fn n_passive(&self) -> usize {
        self.knn.shape()[1]
    }

    fn batched(tape: &mut Tape, m: Var) -> Result<Var, TensorError> {
        let s = tape.shape(m).to_vec();
        tape.reshape(m, &[1, s[0], s[1]])
    }

    /// `W_dis(KNN · z) + b`.
    pub fn distance(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, TensorError> {
        let knn = tape.constant(self.knn.clone());
        let knn = Self::batched(tape, knn)?;
        let agg = tape.bmm(knn, z)?;
        self.w_dis.forward(tape, p, agg)
    }

    /// Row-stochastic `N^A × N^P` mixing weights
    /// `softmax(relu(W_A2 · W_A1ᵀ))`, normalized over passive series.
    pub fn adaptive_weights(&self, tape: &mut Tape, p: &Bound) -> Result<Var, TensorError> {
        let a1t = tape.transpose_last(p.var(self.w_a1))?;
        let scores = tape.matmul(p.var(self.w_a2), a1t)?;
        let scores = tape.relu(scores);
        Ok(tape.softmax_rows(scores))
    }

    pub fn adaptive(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, TensorError> {
        let m = self.adaptive_weights(tape, p)?;
        let m = Self::batched(tape, m)?;
        let agg = tape.bmm(m, z)?;
        self.w_adp.forward(tape, p, agg)
    }

    /// Attention matrices `[B, N^A, N^P + N^A]`, one per head, and the
    /// per-head outputs `[B, N^A, d_head]`.
    pub fn attention(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Vec<Var>, Vec<Var>), TensorError> {
        let batch = tape.shape(z)[0];
        let pos_p = tape.broadcast_batch(p.var(self.x_zp), batch)?;
        let pos_v = tape.broadcast_batch(p.var(self.x_vp), batch)?;
        let shifted = tape.add(z, pos_p)?;
        let x_in = tape.concat(&[shifted, pos_v], 1)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads.len());
        let mut outputs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.q.forward(tape, p, p.var(self.x_vp))?;
            let q = Self::batched(tape, q)?;
            let k = h.k.forward(tape, p, x_in)?;
            let v = h.v.forward(tape, p, x_in)?;
            let kt = tape.transpose_last(k)?;
            let s = tape.bmm(q, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            outputs.push(tape.bmm(a, v)?);
            weights.push(a);
        }
        Ok((weights, outputs))
    }

    pub fn dynamic(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, TensorError> {
        let (_, outputs) = self.attention(tape, p, z)?;
        let cat = tape.concat(&outputs, 2)?;
        let h = self.w1.forward(tape, p, cat)?;
        let h = tape.relu(h);
        self.w2.forward(tape, p, h)
    }

    /// Full generation from the passive representation `z` (`[B, N^P, H]`)
    /// through fusion and privacy protection.
    pub fn generate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        dp: &DpConfig,
        noisy: bool,
        rng: &mut impl Rng,
    ) -> Result<VirtualNodes, TensorError> {
        let dis = self.distance(tape, p, z)?;
        let adp = self.adaptive(tape, p, z)?;
        let dyn_ = self.dynamic(tape, p, z)?;
        let fused = fuse_virtual_node(tape, dis, adp, dyn_)?;
        let (clipped, published) = dp_protect(tape, fused, dp, noisy, rng)?;
        Ok(VirtualNodes {
            dis,
            adp,
            dyn_,
            fused,
            clipped,
            published,
        })
    }
}

/// `relu(v_dis + v_adp + v_dyn)`.
pub fn fuse_virtual_node(tape: &mut Tape, dis: Var, adp: Var, dyn_: Var) -> Result<Var, TensorError> {
    let s = tape.add(dis, adp)?;
    let s = tape.add(s, dyn_)?;
    Ok(tape.relu(s))
}

/// Active-side gate for one (passive party, level) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub from_virtual: Linear,
    pub from_local: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Gate {
            from_virtual: Linear::new(store, &format!("{name}.virtual"), width, width, true, rng),
            from_local: Linear::new(store, &format!("{name}.local"), width, width, false, rng),
        }
    }

    /// `G = σ(W_G1 v + W_G2 o)`, `h = G⊙o + (1−G)⊙v`. Returns `(h, G)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, v: Var, o: Var) -> Result<(Var, Var), TensorError> {
        let a = self.from_virtual.forward(tape, p, v)?;
        let b = self.from_local.forward(tape, p, o)?;
        let s = tape.add(a, b)?;
        let g = tape.sigmoid(s);
        let keep = tape.mul(g, o)?;
        let rest = tape.one_minus(g);
        let take = tape.mul(rest, v)?;
        Ok((tape.add(keep, take)?, g))
    }
}

#[cfg(test)]
mod tests;
