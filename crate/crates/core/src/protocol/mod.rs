//! Split-learning collaboration between one active party and any number of
//! passive parties: message rounds, training, evaluation, and the
//! transcript audit.

mod metrics;
mod optim;
mod party;
mod transcript;

pub use metrics::Metrics;
pub use optim::Adam;
pub use party::{ActiveParty, ActiveSession, PassiveParty, PassiveSession, PredictFrom};
pub use transcript::{
    audit, inspect, inspect_detached, AuditReport, Direction, Inspection, Message, MessageHeader, OverlapIndex,
    StepLog, Transcript, Violation, ViolationKind, OVERLAP_WINDOW,
};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PreparedData, ScalerState, SplitData};
use crate::models::{CheckpointError, ModelConfig, ParamStore};
use crate::seed::stream;
use crate::tensor::{Tensor, TensorError};
use crate::vna::{DpConfig, VnaConfig, VnaError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vna(#[from] VnaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("level {level}: payload shaped {found:?}, expected {expected:?}")]
    ShapeMismatch {
        level: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("no forward message from party {party} for level {level}, item {item}")]
    MissingForward { party: usize, level: usize, item: usize },
    #[error("no backward message for party {party}, level {level}, item {item}")]
    MissingBackward { party: usize, level: usize, item: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("{0}")]
    Config(String),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub predict_from: PredictFrom,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 250,
            patience: 25,
            predict_from: PredictFrom::Fused,
        }
    }
}

/// Passive representation level `passive_level` feeds the fusion applied
/// to the output of active spatial layer `active_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelWiring {
    pub passive_level: usize,
    pub active_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub levels: Vec<LevelWiring>,
}

/// One alignment level per spatial layer: passive level `ℓ−1` (0 is the
/// temporal representation) fuses into active layer output `ℓ`.
pub fn wire_levels(spatial_layers: usize) -> Result<AlignmentPlan, ProtocolError> {
    if spatial_layers == 0 {
        return Err(ProtocolError::Config("at least one spatial layer is required".into()));
    }
    Ok(AlignmentPlan {
        levels: (0..spatial_layers)
            .map(|l| LevelWiring {
                passive_level: l,
                active_layer: l,
            })
            .collect(),
    })
}

/// Everything needed to build the parties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSetup {
    pub model: ModelConfig,
    pub vna: VnaConfig,
    pub dp: DpConfig,
    pub train: TrainConfig,
    /// Train the active party alone (no passive parties).
    pub local_only: bool,
    /// Training steps whose payloads are kept in the transcript.
    pub capture_steps: usize,
}

impl Default for FederationSetup {
    fn default() -> Self {
        FederationSetup {
            model: ModelConfig::default(),
            vna: VnaConfig::default(),
            dp: DpConfig::default(),
            train: TrainConfig::default(),
            local_only: false,
            capture_steps: 2,
        }
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Mean gate activation over all fusions; `None` without passive parties.
    pub gate_mean: Option<f64>,
}

/// Gradients of one batch without any parameter update.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub active: Vec<Tensor>,
    pub passive: Vec<Vec<Tensor>>,
    pub gate_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mae: f64,
    pub gate_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_mae: f64,
    pub stopped_early: bool,
}

/// All parties of one experiment plus the shared transcript.
#[derive(Debug, Clone)]
pub struct Federation {
    pub setup: FederationSetup,
    pub active: ActiveParty,
    pub passives: Vec<PassiveParty>,
    pub transcript: Transcript,
    order_rng: ChaCha8Rng,
}

impl Federation {
    /// Builds parties from the shapes and coordinates in `data`; every party
    /// draws from its own seeded streams.
    pub fn new(setup: FederationSetup, data: &PreparedData, seed: u64) -> Result<Self, ProtocolError> {
        setup.dp.validate().map_err(ProtocolError::Config)?;
        let plan = wire_levels(setup.model.spatial_layers)?;
        let split = &data.train;
        let a = &split.active;
        let passives_data = if setup.local_only { &[][..] } else { &split.passives[..] };
        let head_out = split.spec.horizon * a.output_features.len();
        let active = ActiveParty::new(
            &setup.model,
            &setup.train,
            plan.clone(),
            &a.coords,
            a.n_features,
            head_out,
            passives_data.len(),
            &mut stream(seed, "init/active"),
        );
        let passives = passives_data
            .iter()
            .enumerate()
            .map(|(i, p)| {
                PassiveParty::new(
                    i,
                    &setup.model,
                    &setup.vna,
                    setup.dp,
                    &setup.train,
                    &plan,
                    &a.coords,
                    &p.coords,
                    p.n_features,
                    &mut stream(seed, &format!("init/passive{i}")),
                    stream(seed, &format!("dp-noise/passive{i}")),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let transcript = Transcript::new(
            a.n_series(),
            setup.model.hidden,
            plan.levels.len(),
            passives.len(),
            setup.capture_steps,
        );
        Ok(Federation {
            setup,
            active,
            passives,
            transcript,
            order_rng: stream(seed, "order"),
        })
    }

    pub fn levels(&self) -> usize {
        self.active.plan.levels.len()
    }

    fn run(
        &mut self,
        split: &SplitData,
        samples: &[usize],
        noisy: bool,
        record: bool,
    ) -> Result<(Vec<PassiveSession>, ActiveSession), ProtocolError> {
        if record {
            self.transcript.begin_step(samples.len());
        }
        let active_batch = split.active_batch(samples);
        let mut sessions = Vec::with_capacity(self.passives.len());
        let mut inbox = Vec::with_capacity(self.passives.len());
        for party in &mut self.passives {
            let batch = split.passive_batch(party.id, samples);
            let (session, outbox) = party.forward(&batch, noisy)?;
            let mut msgs = Vec::with_capacity(outbox.len());
            for (msg, ins) in outbox {
                if record {
                    self.transcript.record(&msg, ins);
                }
                msgs.push(msg);
            }
            sessions.push(session);
            inbox.push(msgs);
        }
        let session = self.active.forward(&active_batch, &inbox)?;
        Ok((sessions, session))
    }

    fn gate_mean(session: &ActiveSession) -> Option<f64> {
        let (sum, n) = session.gate_values.iter().fold((0.0, 0usize), |(s, n), &g| {
            let t = session.tape.value(g);
            (s + t.sum(), n + t.len())
        });
        (n > 0).then(|| sum / n as f64)
    }

    /// Forward and backward for one batch; records the exchange when
    /// `record` is set.
    pub fn gradients(&mut self, split: &SplitData, samples: &[usize], record: bool) -> Result<BatchGradients, ProtocolError> {
        let noisy = self.setup.dp.noise_in_training;
        let (sessions, mut session) = self.run(split, samples, noisy, record)?;
        let labels = split.labels(samples);
        let gate_mean = Self::gate_mean(&session);
        let (loss, active, outbox) = self.active.backward(&mut session, &labels)?;
        let mut passive = Vec::with_capacity(self.passives.len());
        for ((party, s), msgs) in self.passives.iter().zip(&sessions).zip(outbox) {
            let mut inbox = Vec::with_capacity(msgs.len());
            for (msg, ins) in msgs {
                if record {
                    self.transcript.record(&msg, ins);
                }
                inbox.push(msg);
            }
            passive.push(party.backward(s, &inbox)?);
        }
        Ok(BatchGradients {
            loss,
            active,
            passive,
            gate_mean,
        })
    }

    /// One training step: exchange, backpropagate, and update every party.
    pub fn step(&mut self, split: &SplitData, samples: &[usize]) -> Result<StepOutcome, ProtocolError> {
        let g = self.gradients(split, samples, true)?;
        if g.loss.is_finite() {
            self.active.apply(&g.active);
            for (party, grads) in self.passives.iter_mut().zip(&g.passive) {
                party.apply(grads);
            }
        }
        Ok(StepOutcome {
            loss: g.loss,
            gate_mean: g.gate_mean,
        })
    }

    /// Scaled predictions `[B, N^A, horizon·F_out]`; publications are noised
    /// whenever ε is finite.
    pub fn predict(&mut self, split: &SplitData, samples: &[usize]) -> Result<Tensor, ProtocolError> {
        let (_, session) = self.run(split, samples, true, false)?;
        Ok(session.tape.value(session.prediction).clone())
    }

    /// Metrics on de-normalized predictions over every sample of `split`.
    pub fn evaluate(&mut self, split: &SplitData, scaler: &ScalerState) -> Result<Metrics, ProtocolError> {
        let bs = self.setup.train.batch_size.max(1);
        let out = &split.active.output_features;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        let all: Vec<usize> = (0..split.len()).collect();
        for chunk in all.chunks(bs) {
            let p = self.predict(split, chunk)?;
            let y = split.labels(chunk);
            for (i, (&a, &b)) in p.data().iter().zip(y.data()).enumerate() {
                let f = out[i % out.len()];
                pred.push(scaler.inverse(f, a));
                truth.push(scaler.inverse(f, b));
            }
        }
        Ok(Metrics::compute(&pred, &truth))
    }

    pub fn stores(&self) -> Vec<(String, ParamStore)> {
        let mut out = vec![("active".to_string(), self.active.store.clone())];
        out.extend(self.passives.iter().map(|p| (format!("passive{}", p.id), p.store.clone())));
        out
    }

    pub fn restore_stores(&mut self, stores: &[(String, ParamStore)]) {
        for (name, store) in stores {
            if name == "active" {
                self.active.store = store.clone();
            } else if let Some(p) = self.passives.iter_mut().find(|p| format!("passive{}", p.id) == *name) {
                p.store = store.clone();
            }
        }
    }

    /// Mini-batch training with validation-based model selection and early
    /// stopping. The best parameters are restored on return.
    pub fn train(&mut self, data: &PreparedData) -> Result<History, ProtocolError> {
        let cfg = self.setup.train;
        if cfg.batch_size == 0 || cfg.max_epochs == 0 {
            return Err(ProtocolError::Config("batch_size and max_epochs must be positive".into()));
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut epochs = Vec::new();
        let mut best = (f64::INFINITY, 0usize, self.stores());
        let mut stopped_early = false;
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut self.order_rng);
            let (mut loss_sum, mut gate_sum, mut n) = (0.0, 0.0, 0usize);
            let mut has_gate = false;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let out = self.step(&data.train, chunk)?;
                if !out.loss.is_finite() {
                    return Err(ProtocolError::Divergence { epoch, batch: b });
                }
                loss_sum += out.loss;
                if let Some(g) = out.gate_mean {
                    gate_sum += g;
                    has_gate = true;
                }
                n += 1;
            }
            let valid_mae = self.evaluate(&data.valid, &data.active_scaler)?.mae;
            epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sum / n as f64,
                valid_mae,
                gate_mean: has_gate.then(|| gate_sum / n as f64),
            });
            if valid_mae < best.0 {
                best = (valid_mae, epoch, self.stores());
            } else if epoch - best.1 >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        self.restore_stores(&best.2);
        Ok(History {
            epochs,
            best_epoch: best.1,
            best_valid_mae: best.0,
            stopped_early,
        })
    }
}


/// Largest relative gap between protocol gradients and central differences
/// of the MAE loss, over every parameter of every party.
///
/// Uses the same error measure and kink exclusion as
/// [`gradient_check`](crate::tensor::gradient_check). DP noise must be off.
pub fn protocol_gradient_check(
    fed: &mut Federation,
    split: &SplitData,
    samples: &[usize],
    step: f64,
) -> Result<crate::tensor::GradCheckReport, ProtocolError> {
    if fed.setup.dp.epsilon.is_some() && fed.setup.dp.noise_in_training {
        return Err(ProtocolError::Config("finite differences need noise disabled".into()));
    }
    let base = fed.gradients(split, samples, false)?;
    let y0 = base.loss;
    let mut report = crate::tensor::GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        non_finite: None,
    };
    let n_groups = 1 + fed.passives.len();
    for group in 0..n_groups {
        let analytic = if group == 0 { &base.active } else { &base.passive[group - 1] };
        let ids: Vec<_> = if group == 0 {
            fed.active.store.ids().collect()
        } else {
            fed.passives[group - 1].store.ids().collect()
        };
        let mut flat = 0;
        for (id, grad) in ids.into_iter().zip(analytic) {
            for j in 0..grad.len() {
                let eval = |fed: &mut Federation, delta: f64| -> Result<f64, ProtocolError> {
                    let store = if group == 0 {
                        &mut fed.active.store
                    } else {
                        &mut fed.passives[group - 1].store
                    };
                    store.get_mut(id).data_mut()[j] += delta;
                    let loss = fed.gradients(split, samples, false).map(|g| g.loss);
                    let store = if group == 0 {
                        &mut fed.active.store
                    } else {
                        &mut fed.passives[group - 1].store
                    };
                    store.get_mut(id).data_mut()[j] -= delta;
                    loss
                };
                let plus = eval(fed, step)?;
                let minus = eval(fed, -step)?;
                let a = grad.data()[j];
                let numeric = (plus - minus) / (2.0 * step);
                let (fwd, bwd) = ((plus - y0) / step, (y0 - minus) / step);
                if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                    report.passed = false;
                    report.non_finite.get_or_insert((group, flat + j));
                    continue;
                }
                if (fwd - bwd).abs() > 1e-2 * numeric.abs().max(1.0) {
                    report.excluded.push((group, flat + j));
                    continue;
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((group, flat + j));
                }
            }
            flat += grad.len();
        }
    }
    Ok(report)
}
