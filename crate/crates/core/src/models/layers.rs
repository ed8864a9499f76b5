use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Linear => x,
        }
    }
}

/// `x·W + b` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Gated recurrent cell with reset, update, and candidate blocks packed in
/// that order along the output axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub width: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, width: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            input: Linear::new(store, &format!("{name}.input"), d_in, 3 * width, true, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), width, 3 * width, true, rng),
            width,
        }
    }

    /// One step: `h' = n + z⊙(h − n)`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var, TensorError> {
        let hw = self.width;
        let gx = self.input.forward(tape, p, x)?;
        let gh = self.hidden.forward(tape, p, h)?;
        let part = |tape: &mut Tape, v: Var, k: usize| tape.slice(v, 1, k * hw, (k + 1) * hw);
        let (xr, xz, xn) = (part(tape, gx, 0)?, part(tape, gx, 1)?, part(tape, gx, 2)?);
        let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Per-step embedding followed by stacked recurrent layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalStack {
    pub embed: Linear,
    pub layers: Vec<GruCell>,
    pub n_features: usize,
    pub width: usize,
}

impl TemporalStack {
    pub fn new(store: &mut ParamStore, n_features: usize, width: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let embed = Linear::new(store, "temporal.embed", n_features, width, true, rng);
        let layers = (0..n_layers)
            .map(|m| GruCell::new(store, &format!("temporal.gru{m}"), width, width, rng))
            .collect();
        TemporalStack {
            embed,
            layers,
            n_features,
            width,
        }
    }

    /// Runs `steps` (each `[rows, F]`, oldest first) and returns the last
    /// hidden state of the top layer, `[rows, H]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, steps: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = steps.first() else {
            return Err(TensorError::invalid("temporal_forward", "empty window"));
        };
        let shape = tape.shape(first).to_vec();
        if shape.len() != 2 || shape[1] != self.n_features {
            return Err(TensorError::invalid(
                "temporal_forward",
                format!("expected [rows, {}] inputs, got {shape:?}", self.n_features),
            ));
        }
        let rows = shape[0];
        let mut seq = steps
            .iter()
            .map(|&x| self.embed.forward(tape, p, x))
            .collect::<Result<Vec<_>, _>>()?;
        for cell in &self.layers {
            let mut h = tape.constant(crate::tensor::Tensor::zeros(&[rows, self.width]));
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                h = cell.step(tape, p, x, h)?;
                out.push(h);
            }
            seq = out;
        }
        Ok(*seq.last().expect("non-empty window"))
    }
}

/// One diffusion step `act(A·h·W_self + h·W_skip + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialLayer {
    pub w_self: ParamId,
    pub w_skip: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl SpatialLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        SpatialLayer {
            w_self: store.uniform(format!("{name}.w_self"), &[width, width], width, rng),
            w_skip: store.uniform(format!("{name}.w_skip"), &[width, width], width, rng),
            bias: store.zeros(format!("{name}.b"), &[width]),
            activation,
        }
    }

    /// `adj` is `[1, N, N]`, `h` is `[B, N, H]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, adj: Var, h: Var) -> Result<Var, TensorError> {
        let mixed = tape.bmm(adj, h)?;
        let a = tape.matmul(mixed, p.var(self.w_self))?;
        let b = tape.matmul(h, p.var(self.w_skip))?;
        let s = tape.add(a, b)?;
        let s = tape.add_bias(s, p.var(self.bias))?;
        Ok(self.activation.apply(tape, s))
    }
}

/// Two-layer perceptron mapping `[.., H]` to `[.., horizon·F_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, width: usize, out: usize, rng: &mut impl Rng) -> Self {
        PredictionHead {
            hidden: Linear::new(store, "head.hidden", width, width, true, rng),
            out: Linear::new(store, "head.out", width, out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var, TensorError> {
        let z = self.hidden.forward(tape, p, h)?;
        let z = tape.relu(z);
        self.out.forward(tape, p, z)
    }
}
