use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::models::ParamStore;
use crate::protocol::{Adam, PassiveParty};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// A differentiable map from a batch of inputs to embeddings, as known to
/// a white-box attacker.
pub trait EmbeddingMap {
    /// Shape of one input sample.
    fn input_shape(&self) -> Vec<usize>;
    /// Axis of the per-sample shape that indexes time.
    fn time_axis(&self) -> usize;
    /// `x` is `[B, ..input_shape]`; the output has a leading `B` axis.
    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError>;
}

/// `x ↦ flatten(x)·W` for samples of shape `[T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub w: Tensor,
    pub shape: Vec<usize>,
}

impl LinearMap {
    pub fn new(w: Tensor, steps: usize, features: usize) -> Self {
        assert_eq!(w.shape()[0], steps * features, "rows must equal steps·features");
        LinearMap {
            w,
            shape: vec![steps, features],
        }
    }
}

impl EmbeddingMap for LinearMap {
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn time_axis(&self) -> usize {
        0
    }

    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let b = tape.shape(x)[0];
        let flat = tape.reshape(x, &[b, self.w.shape()[0]])?;
        let w = tape.constant(self.w.clone());
        tape.matmul(flat, w)
    }
}

/// Which published levels the attacker matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetLevels {
    /// The virtual node built from the temporal representation.
    #[default]
    First,
    /// Every level jointly.
    All,
}

impl TargetLevels {
    pub fn levels(self, total: usize) -> Vec<usize> {
        match self {
            TargetLevels::First => vec![0],
            TargetLevels::All => (0..total).collect(),
        }
    }
}

/// A passive party's clipped, noise-free virtual nodes as a function of its
/// raw window `[N^P, T^P, F^P]`.
pub struct PassiveMap<'a> {
    pub party: &'a PassiveParty,
    pub steps: usize,
    pub targets: TargetLevels,
}

impl EmbeddingMap for PassiveMap<'_> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.party.model.n_series(), self.steps, self.party.model.temporal.n_features]
    }

    fn time_axis(&self) -> usize {
        1
    }

    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let (b, n, f) = (tape.shape(x)[0], self.party.model.n_series(), self.party.model.temporal.n_features);
        let steps = (0..self.steps)
            .map(|t| {
                let s = tape.slice(x, 2, t, t + 1)?;
                tape.reshape(s, &[b * n, f])
            })
            .collect::<Result<Vec<_>, _>>()?;
        let p = self.party.store.bind(tape);
        // noise is off, so the generator is never consulted
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let nodes = self
            .party
            .virtual_nodes(tape, &p, &steps, b, false, &mut unused)
            .map_err(|e| TensorError::invalid("passive map", e.to_string()))?;
        let picked: Vec<Var> = self
            .targets
            .levels(nodes.len())
            .into_iter()
            .map(|l| nodes[l].clipped)
            .collect();
        if picked.len() == 1 {
            Ok(picked[0])
        } else {
            tape.concat(&picked, 2)
        }
    }
}

/// Optimizer and prior for gradient-based inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhiteboxConfig {
    /// Weight of the total-variation prior.
    pub lambda: f64,
    /// Exponent of the total-variation prior.
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for WhiteboxConfig {
    fn default() -> Self {
        WhiteboxConfig {
            lambda: 1e-4,
            beta: 2.0,
            steps: 500,
            lr: 0.1,
            weight_decay: 1e-5,
        }
    }
}

/// `‖v − f(x)‖² + λ Σ (|x_{t+1} − x_t|²)^{β/2}` summed over the batch.
pub fn objective(tape: &mut Tape, map: &dyn EmbeddingMap, x: Var, targets: Var, cfg: &WhiteboxConfig) -> Result<Var, TensorError> {
    let fx = map.embed(tape, x)?;
    let diff = tape.sub(targets, fx)?;
    let sq = tape.square(diff);
    let fit = tape.sum(sq);
    let axis = map.time_axis() + 1;
    let len = tape.shape(x)[axis];
    if cfg.lambda == 0.0 || len < 2 {
        return Ok(fit);
    }
    let later = tape.slice(x, axis, 1, len)?;
    let earlier = tape.slice(x, axis, 0, len - 1)?;
    let d = tape.sub(later, earlier)?;
    let tv = tape.abs_pow(d, cfg.beta)?;
    let tv = tape.sum(tv);
    let tv = tape.scale(tv, cfg.lambda);
    tape.add(fit, tv)
}

fn run_inversion(
    map: &dyn EmbeddingMap,
    targets: &Tensor,
    init: Tensor,
    cfg: &WhiteboxConfig,
) -> Result<Result<Tensor, usize>, TensorError> {
    let mut store = ParamStore::new();
    let id = store.add("x", init);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.variable(store.get(id).clone());
        let v = tape.constant(targets.clone());
        let loss = objective(&mut tape, map, x, v, cfg)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Ok(Err(step));
        }
        let g = tape.backward(loss)?.wrt(x, store.get(id).shape());
        if !g.all_finite() {
            return Ok(Err(step));
        }
        opt.update(&mut store, &[g]);
    }
    let x = store.get(id).clone();
    Ok(if x.all_finite() { Ok(x) } else { Err(cfg.steps) })
}

/// Reconstructs inputs whose embeddings match `targets` (`[B, ..]`),
/// starting from zeros. A non-finite objective triggers one restart from a
/// small random point.
pub fn whitebox_attack(
    map: &dyn EmbeddingMap,
    targets: &Tensor,
    cfg: &WhiteboxConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>, AttackError> {
    let b = targets.shape()[0];
    let per = map.input_shape();
    let mut shape = vec![b];
    shape.extend(&per);
    let x = match run_inversion(map, targets, Tensor::zeros(&shape), cfg)? {
        Ok(x) => x,
        Err(_) => {
            let n = shape.iter().product();
            let init = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1e-2..1e-2)).collect())?;
            run_inversion(map, targets, init, cfg)?.map_err(|step| AttackError::NonFinite { step })?
        }
    };
    let size: usize = per.iter().product();
    Ok(x.data()
        .chunks(size)
        .map(|c| Tensor::new(per.clone(), c.to_vec()).expect("per-sample shape"))
        .collect())
}
