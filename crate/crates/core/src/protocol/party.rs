use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transcript::{inspect, inspect_detached, Direction, Inspection, Message, OverlapIndex};
use super::{Adam, AlignmentPlan, ProtocolError, TrainConfig};
use crate::data::{distance_matrix, PartyBatch};
use crate::models::{Bound, LocalModel, ModelConfig, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vna::{knn_matrix, DpConfig, Gate, VirtualNodes, VnaConfig, VnaGenerator};

/// Which active representation feeds the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictFrom {
    /// The output of the last gated fusion.
    #[default]
    Fused,
    /// The last spatial layer's output before its fusion.
    Local,
}

/// Splits `[B, N, H]` into per-sample `[N, H]` tensors.
fn split_items(t: &Tensor) -> Vec<Tensor> {
    let (b, n, h) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    t.data()
        .chunks(n * h)
        .take(b)
        .map(|c| Tensor::new(vec![n, h], c.to_vec()).expect("positive dims"))
        .collect()
}

/// A party contributing only published virtual nodes.
#[derive(Debug, Clone)]
pub struct PassiveParty {
    pub id: usize,
    pub store: ParamStore,
    pub model: LocalModel,
    /// One generator per alignment level.
    pub generators: Vec<VnaGenerator>,
    pub dp: DpConfig,
    pub noise_rng: ChaCha8Rng,
    pub optimizer: Adam,
}

/// A passive party's tape kept alive between its forward and backward.
#[derive(Debug)]
pub struct PassiveSession {
    pub tape: Tape,
    pub bound: Bound,
    /// Published `[B, N^A, H]` virtual nodes per level.
    pub published: Vec<Var>,
    pub nodes: Vec<VirtualNodes>,
    pub batch: usize,
}

#[allow(clippy::too_many_arguments)]
fn generate_levels(
    model: &LocalModel,
    generators: &[VnaGenerator],
    dp: &DpConfig,
    tape: &mut Tape,
    p: &Bound,
    steps: &[Var],
    batch: usize,
    noisy: bool,
    rng: &mut impl Rng,
) -> Result<Vec<VirtualNodes>, ProtocolError> {
    let adj = model.adjacency_var(tape)?;
    let mut z = model.temporal_forward(tape, p, steps, batch)?;
    let mut out = Vec::with_capacity(generators.len());
    for (level, g) in generators.iter().enumerate() {
        if level > 0 {
            z = model.spatial_forward(tape, p, adj, level - 1, z)?;
        }
        out.push(g.generate(tape, p, z, dp, noisy, rng)?);
    }
    Ok(out)
}

impl PassiveParty {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        model_cfg: &ModelConfig,
        vna_cfg: &VnaConfig,
        dp: DpConfig,
        train: &TrainConfig,
        plan: &AlignmentPlan,
        active_coords: &[(f64, f64)],
        coords: &[(f64, f64)],
        n_features: usize,
        init_rng: &mut impl Rng,
        noise_rng: ChaCha8Rng,
    ) -> Result<Self, ProtocolError> {
        let mut store = ParamStore::new();
        let model = LocalModel::new(&mut store, model_cfg, coords, n_features, None, init_rng);
        let knn = knn_matrix(&distance_matrix(active_coords, coords), vna_cfg.k)?;
        let generators = plan
            .levels
            .iter()
            .map(|l| VnaGenerator::new(&mut store, l.passive_level, knn.clone(), model_cfg.hidden, vna_cfg, init_rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PassiveParty {
            id,
            store,
            model,
            generators,
            dp,
            noise_rng,
            optimizer: Adam::new(train.lr, train.weight_decay),
        })
    }

    pub fn n_active(&self) -> usize {
        self.generators.first().map_or(0, VnaGenerator::n_active)
    }

    /// Virtual nodes for every level built on an existing tape; used by
    /// attacks that differentiate with respect to the inputs.
    pub fn virtual_nodes(
        &self,
        tape: &mut Tape,
        p: &Bound,
        steps: &[Var],
        batch: usize,
        noisy: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<VirtualNodes>, ProtocolError> {
        generate_levels(&self.model, &self.generators, &self.dp, tape, p, steps, batch, noisy, rng)
    }

    /// Computes and inspects this party's publications for one batch.
    pub fn forward(
        &mut self,
        batch: &PartyBatch,
        noisy: bool,
    ) -> Result<(PassiveSession, Vec<(Message, Inspection)>), ProtocolError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let steps = LocalModel::inputs(&mut tape, batch);
        let nodes = generate_levels(
            &self.model,
            &self.generators,
            &self.dp,
            &mut tape,
            &bound,
            &steps,
            batch.batch,
            noisy,
            &mut self.noise_rng,
        )?;
        let index = OverlapIndex::from_tape(&tape);
        let mut outbox = Vec::new();
        for (level, vn) in nodes.iter().enumerate() {
            for (item, payload) in split_items(tape.value(vn.published)).into_iter().enumerate() {
                let ins = inspect(&tape, vn.published, &payload, &index);
                outbox.push((
                    Message {
                        direction: Direction::ForwardVn,
                        party: self.id,
                        level,
                        item,
                        payload,
                    },
                    ins,
                ));
            }
        }
        let session = PassiveSession {
            published: nodes.iter().map(|n| n.published).collect(),
            nodes,
            tape,
            bound,
            batch: batch.batch,
        };
        Ok((session, outbox))
    }

    /// Resumes the local tape from the returned virtual-node gradients.
    pub fn backward(&self, session: &PassiveSession, inbox: &[Message]) -> Result<Vec<Tensor>, ProtocolError> {
        let mut seeds = Vec::with_capacity(session.published.len());
        for (level, &var) in session.published.iter().enumerate() {
            let shape = session.tape.shape(var).to_vec();
            let per_item = shape[1] * shape[2];
            let mut grad = vec![0.0; shape.iter().product()];
            for item in 0..session.batch {
                let msg = inbox
                    .iter()
                    .find(|m| m.level == level && m.item == item && m.direction == Direction::BackwardGrad)
                    .ok_or(ProtocolError::MissingBackward {
                        party: self.id,
                        level,
                        item,
                    })?;
                if msg.payload.len() != per_item {
                    return Err(ProtocolError::ShapeMismatch {
                        level,
                        expected: shape[1..].to_vec(),
                        found: msg.payload.shape().to_vec(),
                    });
                }
                grad[item * per_item..(item + 1) * per_item].copy_from_slice(msg.payload.data());
            }
            seeds.push((var, Tensor::new(shape, grad)?));
        }
        let grads = session.tape.backward_from(&seeds)?;
        Ok(session.bound.collect(&self.store, &grads))
    }

    pub fn apply(&mut self, grads: &[Tensor]) {
        self.optimizer.update(&mut self.store, grads);
    }
}

/// The label holder: local model, prediction head, and one gate per
/// (passive party, level).
#[derive(Debug, Clone)]
pub struct ActiveParty {
    pub store: ParamStore,
    pub model: LocalModel,
    pub gates: Vec<Vec<Gate>>,
    pub plan: AlignmentPlan,
    pub predict_from: PredictFrom,
    pub optimizer: Adam,
}

#[derive(Debug)]
pub struct ActiveSession {
    pub tape: Tape,
    pub bound: Bound,
    /// Received leaves indexed `[party][level][item]`.
    pub received: Vec<Vec<Vec<Var>>>,
    /// `[B, N^A, horizon·F_out]`.
    pub prediction: Var,
    pub gate_values: Vec<Var>,
    pub batch: usize,
}

impl ActiveParty {
    pub fn new(
        model_cfg: &ModelConfig,
        train: &TrainConfig,
        plan: AlignmentPlan,
        coords: &[(f64, f64)],
        n_features: usize,
        head_out: usize,
        n_passive: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let model = LocalModel::new(&mut store, model_cfg, coords, n_features, Some(head_out), rng);
        let gates = (0..n_passive)
            .map(|p| {
                (0..plan.levels.len())
                    .map(|l| Gate::new(&mut store, &format!("gate.p{p}.l{l}"), model_cfg.hidden, rng))
                    .collect()
            })
            .collect();
        ActiveParty {
            store,
            model,
            gates,
            plan,
            predict_from: train.predict_from,
            optimizer: Adam::new(train.lr, train.weight_decay),
        }
    }

    pub fn n_series(&self) -> usize {
        self.model.n_series()
    }

    /// Runs the local stack, fusing each passive party's virtual nodes into
    /// the spatial layers in party order. `inbox[p]` holds party `p`'s
    /// forward messages.
    pub fn forward(&self, batch: &PartyBatch, inbox: &[Vec<Message>]) -> Result<ActiveSession, ProtocolError> {
        if inbox.len() != self.gates.len() {
            return Err(ProtocolError::Config(format!(
                "{} passive inboxes for {} configured parties",
                inbox.len(),
                self.gates.len()
            )));
        }
        let (b, n, h) = (batch.batch, self.n_series(), self.model.width);
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let steps = LocalModel::inputs(&mut tape, batch);
        let adj = self.model.adjacency_var(&mut tape)?;
        let mut state = self.model.temporal_forward(&mut tape, &bound, &steps, b)?;

        let levels = self.plan.levels.len();
        let mut received = vec![vec![Vec::with_capacity(b); levels]; inbox.len()];
        let mut gate_values = Vec::new();
        let mut local_last = state;
        for (li, wiring) in self.plan.levels.iter().enumerate() {
            let o = self.model.spatial_forward(&mut tape, &bound, adj, wiring.active_layer, state)?;
            local_last = o;
            let mut fused = o;
            for (p, msgs) in inbox.iter().enumerate() {
                let mut items = Vec::with_capacity(b);
                for item in 0..b {
                    let msg = msgs
                        .iter()
                        .find(|m| m.level == li && m.item == item)
                        .ok_or(ProtocolError::MissingForward { party: p, level: li, item })?;
                    if msg.payload.shape() != [n, h] {
                        return Err(ProtocolError::ShapeMismatch {
                            level: li,
                            expected: vec![n, h],
                            found: msg.payload.shape().to_vec(),
                        });
                    }
                    let leaf = tape.received(msg.payload.clone());
                    received[p][li].push(leaf);
                    items.push(tape.reshape(leaf, &[1, n, h])?);
                }
                let v = tape.concat(&items, 0)?;
                let (next, g) = self.gates[p][li].forward(&mut tape, &bound, v, fused)?;
                gate_values.push(g);
                fused = next;
            }
            state = fused;
        }
        let head_in = match self.predict_from {
            PredictFrom::Fused => state,
            PredictFrom::Local => local_last,
        };
        let prediction = self.model.predict(&mut tape, &bound, head_in)?;
        Ok(ActiveSession {
            tape,
            bound,
            received,
            prediction,
            gate_values,
            batch: b,
        })
    }

    /// MAE loss, local gradients, and one gradient message per received
    /// virtual node.
    pub fn backward(
        &self,
        session: &mut ActiveSession,
        labels: &Tensor,
    ) -> Result<(f64, Vec<Tensor>, Vec<Vec<(Message, Inspection)>>), ProtocolError> {
        let tape = &mut session.tape;
        let y = tape.input(labels.clone());
        let diff = tape.sub(session.prediction, y)?;
        let abs = tape.abs(diff);
        let loss = tape.mean(abs);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let index = OverlapIndex::from_tape(tape);
        let outbox = session
            .received
            .iter()
            .enumerate()
            .map(|(party, levels)| {
                levels
                    .iter()
                    .enumerate()
                    .flat_map(|(level, items)| {
                        items.iter().enumerate().map(move |(item, &var)| (level, item, var))
                    })
                    .map(|(level, item, var)| {
                        let payload = grads.wrt(var, tape.shape(var));
                        let ins = inspect_detached(&payload, &index);
                        (
                            Message {
                                direction: Direction::BackwardGrad,
                                party,
                                level,
                                item,
                                payload,
                            },
                            ins,
                        )
                    })
                    .collect()
            })
            .collect();
        Ok((value, session.bound.collect(&self.store, &grads), outbox))
    }

    pub fn apply(&mut self, grads: &[Tensor]) {
        self.optimizer.update(&mut self.store, grads);
    }
}
