use serde::{Deserialize, Serialize};

use super::kernels::{axis_extents, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, sign, softmax_row};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Origin of a leaf value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafKind {
    /// Private raw features of the owning party. Never differentiated.
    Input,
    /// A trainable parameter of the owning party.
    Parameter,
    /// A payload received from another party.
    Received,
    /// A free differentiable value (attack reconstructions, gradient checks).
    Variable,
    /// Anything else that is neither private nor trainable (noise, masks).
    Constant,
}

impl LeafKind {
    fn requires_grad(self) -> bool {
        matches!(
            self,
            LeafKind::Parameter | LeafKind::Received | LeafKind::Variable
        )
    }
}

/// What a recorded value was computed from.
///
/// `passthrough` is set when the value is a pure rearrangement (reshape,
/// slice, transpose, broadcast, concat) of leaves of a single kind, i.e. its
/// numbers are copies of those leaves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub raw_input: bool,
    pub parameter: bool,
    pub received: bool,
    pub passthrough: Option<LeafKind>,
}

impl Provenance {
    fn leaf(kind: LeafKind) -> Self {
        Provenance {
            raw_input: kind == LeafKind::Input,
            parameter: kind == LeafKind::Parameter,
            received: kind == LeafKind::Received,
            passthrough: Some(kind),
        }
    }

    fn union(items: impl IntoIterator<Item = Provenance>) -> Self {
        let mut out = Provenance::default();
        for p in items {
            out.raw_input |= p.raw_input;
            out.parameter |= p.parameter;
            out.received |= p.received;
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    AbsPow(Var, f64),
    SoftmaxRows(Var),
    L2NormRows(Var),
    ClipRows(Var, f64),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    TransposeLast(Var),
    BroadcastBatch(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => vec![],
            Op::MatMul(a, b)
            | Op::Bmm(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::AbsPow(a, _)
            | Op::SoftmaxRows(a)
            | Op::L2NormRows(a)
            | Op::ClipRows(a, _)
            | Op::Reshape(a)
            | Op::TransposeLast(a)
            | Op::BroadcastBatch(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(xs, _) => xs.clone(),
        }
    }

    fn rearranges(&self) -> bool {
        matches!(
            self,
            Op::Concat(..)
                | Op::Slice { .. }
                | Op::Reshape(_)
                | Op::TransposeLast(_)
                | Op::BroadcastBatch(_)
        )
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    provenance: Provenance,
}

/// Single-owner record of a differentiable computation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when it was unreachable.
    pub fn wrt(&self, var: Var, like: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn provenance(&self, v: Var) -> Provenance {
        self.nodes[v.0].provenance
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes[v.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Leaves of the given kind, in recording order.
    pub fn leaves(&self, kind: LeafKind) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(k) if k == kind))
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf(kind),
            requires_grad: kind.requires_grad(),
            provenance: Provenance::leaf(kind),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Input)
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Variable)
    }

    pub fn received(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Received)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Constant)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut provenance = Provenance::union(inputs.iter().map(|v| self.nodes[v.0].provenance));
        if op.rearranges() {
            let kinds: Vec<_> = inputs
                .iter()
                .map(|v| self.nodes[v.0].provenance.passthrough)
                .collect();
            if let Some(Some(first)) = kinds.first() {
                if kinds.iter().all(|k| *k == Some(*first)) {
                    provenance.passthrough = Some(*first);
                }
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            provenance,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] → [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b)))
    }

    /// Batched product `[B|1, m, k] · [B|1, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batch_ok = sa.len() == 3
            && sb.len() == 3
            && (sa[0] == sb[0] || sa[0] == 1 || sb[0] == 1);
        if !batch_ok || sa[2] != sb[1] {
            return Err(TensorError::mismatch("bmm", sa, sb));
        }
        let (ba, m, k, bb, n) = (sa[0], sa[1], sa[2], sb[0], sb[2]);
        let batch = ba.max(bb);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = if ba == 1 { 0 } else { i };
            let bi = if bb == 1 { 0 } else { i };
            gemm_acc(
                &ad[ai * m * k..(ai + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor {
            shape: vec![batch, m, n],
            data: out,
        };
        Ok(self.push(value, Op::Bmm(a, b)))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_blocks(self.value(a).data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor { shape, data }, Op::TransposeLast(a)))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::mismatch(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector `bias[n]` to every row of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || ta.cols() != tb.len() || ta.rank() == 0 {
            return Err(TensorError::mismatch("add_bias", ta.shape(), tb.shape()));
        }
        let n = tb.len();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`, exact at `a = 1`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    /// `|a|^p` elementwise, `p > 0`.
    pub fn abs_pow(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(TensorError::invalid("abs_pow", format!("exponent {p} must be positive")));
        }
        let value = self.value(a).map(|x| x.abs().powf(p));
        Ok(self.push(value, Op::AbsPow(a, p)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::AbsPow(a, 2.0))
    }

    // ---- row-wise -------------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = vec![0.0; ta.len()];
        for (row, out) in ta.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(row, out);
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    /// L2 norm of every row along the last axis; the last axis becomes 1.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let data = ta
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut shape = ta.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        } else {
            *shape.last_mut().unwrap() = 1;
        }
        self.push(Tensor { shape, data }, Op::L2NormRows(a))
    }

    /// Scales each row by `min(1, bound / ‖row‖₂)`.
    pub fn clip_rows(&mut self, a: Var, bound: f64) -> Result<Var, TensorError> {
        if !(bound > 0.0) {
            return Err(TensorError::invalid("clip_rows", format!("bound {bound} must be positive")));
        }
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > bound {
                let s = bound / n;
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::ClipRows(a, bound)))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis)))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, dim, inner) = axis_extents(&s, axis);
        let len = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, Op::Slice { input: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Repeats `a` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, a: Var, batch: usize) -> Result<Var, TensorError> {
        if batch == 0 {
            return Err(TensorError::invalid("broadcast_batch", "batch must be positive"));
        }
        let ta = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(ta.shape());
        let data = ta.data().repeat(batch);
        Ok(self.push(Tensor { shape, data }, Op::BroadcastBatch(a)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a))
    }

    // ---- differentiation ------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_from(&[(loss, Tensor::filled(t.shape(), 1.0))])
    }

    /// Reverse pass seeded with upstream gradients for several outputs.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, TensorError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let want = self.shape(*v);
            if g.shape() != want {
                return Err(TensorError::mismatch("backward seed", want, g.shape()));
            }
            accumulate(&mut grads[v.0], g.data(), 1.0);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = node.value.data();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                if self.needs(*a) {
                    let ga = slot(grads, *a, ta.len());
                    gemm_nt_acc(g, tb.data(), ga, m, k, n);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, tb.len());
                    gemm_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ba, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let (bb, n) = (tb.shape()[0], tb.shape()[2]);
                let batch = ba.max(bb);
                if self.needs(*a) {
                    let ga = slot(grads, *a, ta.len());
                    for i in 0..batch {
                        let ai = if ba == 1 { 0 } else { i };
                        let bi = if bb == 1 { 0 } else { i };
                        gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[ai * m * k..(ai + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, tb.len());
                    for i in 0..batch {
                        let ai = if ba == 1 { 0 } else { i };
                        let bi = if bb == 1 { 0 } else { i };
                        gemm_tn_acc(
                            &ta.data()[ai * m * k..(ai + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g, 1.0);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g, 1.0);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let ga = slot(grads, *a, ta.len());
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gi * y;
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, tb.len());
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gi * y;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g, 1.0);
                }
                if self.needs(*bias) {
                    let n = val(*bias).len();
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (x, gi) in gb.iter_mut().zip(row) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Affine(a, s) => accumulate(&mut grads[a.0], g, *s),
            Op::Relu(a) => {
                let ta = val(*a);
                let ga = slot(grads, *a, ta.len());
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    if v > 0.0 {
                        *x += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, out.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, out.len());
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * (1.0 - y * y);
                }
            }
            Op::Abs(a) => {
                let ta = val(*a);
                let ga = slot(grads, *a, ta.len());
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *x += gi * sign(v);
                }
            }
            Op::AbsPow(a, p) => {
                let ta = val(*a);
                let ga = slot(grads, *a, ta.len());
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(ta.data()) {
                    if v != 0.0 {
                        *x += gi * p * v.abs().powf(p - 1.0) * sign(v);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let ga = slot(grads, *a, out.len());
                for ((y, gr), xr) in out.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((x, yi), gi) in xr.iter_mut().zip(y).zip(gr) {
                        *x += yi * (gi - dot);
                    }
                }
            }
            Op::L2NormRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let ga = slot(grads, *a, ta.len());
                for (((xr, ar), n), gi) in ga.chunks_mut(c).zip(ta.data().chunks(c)).zip(out).zip(g) {
                    if *n > 0.0 {
                        for (x, v) in xr.iter_mut().zip(ar) {
                            *x += gi * v / n;
                        }
                    }
                }
            }
            Op::ClipRows(a, bound) => {
                let ta = val(*a);
                let c = ta.cols();
                let ga = slot(grads, *a, ta.len());
                for ((xr, ar), gr) in ga.chunks_mut(c).zip(ta.data().chunks(c)).zip(g.chunks(c)) {
                    let n = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n <= *bound {
                        for (x, gi) in xr.iter_mut().zip(gr) {
                            *x += gi;
                        }
                    } else {
                        // d/dx (C x / ‖x‖) = (C/‖x‖)(I − x xᵀ/‖x‖²)
                        let dot: f64 = ar.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let s = bound / n;
                        for ((x, gi), v) in xr.iter_mut().zip(gr).zip(ar) {
                            *x += s * (gi - v * dot / (n * n));
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let d = val(*p).shape()[*axis];
                    if self.needs(*p) {
                        let gp = slot(grads, *p, outer * d * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            for (x, s) in gp[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let ts = val(*input).shape().to_vec();
                let (outer, dim, inner) = axis_extents(&ts, *axis);
                let len = node.value.shape()[*axis];
                let gi = slot(grads, *input, outer * dim * inner);
                for o in 0..outer {
                    let dst = &mut gi[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    for (x, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += s;
                    }
                }
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g, 1.0),
            Op::TransposeLast(a) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                accumulate(&mut grads[a.0], &back, 1.0);
            }
            Op::BroadcastBatch(a) => {
                let n = val(*a).len();
                let ga = slot(grads, *a, n);
                for chunk in g.chunks(n) {
                    for (x, s) in ga.iter_mut().zip(chunk) {
                        *x += s;
                    }
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let ga = slot(grads, *a, n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut Option<Vec<f64>>, src: &[f64], scale: f64) {
    match dst {
        Some(d) => {
            for (x, s) in d.iter_mut().zip(src) {
                *x += scale * s;
            }
        }
        None => *dst = Some(src.iter().map(|s| scale * s).collect()),
    }
}

/// Transposes every trailing `r × c` block.
fn transpose_blocks(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (block, dst) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}
