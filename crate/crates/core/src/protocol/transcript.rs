use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::tensor::{LeafKind, Provenance, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ForwardVn,
    BackwardGrad,
}

/// One cross-party payload: a single sample's virtual node at one level, or
/// the gradient returned for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub direction: Direction,
    pub party: usize,
    pub level: usize,
    pub item: usize,
    pub payload: Tensor,
}

impl Message {
    pub fn n_values(&self) -> usize {
        self.payload.len()
    }

    pub fn byte_size(&self) -> usize {
        8 * self.payload.len()
    }
}

/// Consecutive values compared when looking for copied arrays.
pub const OVERLAP_WINDOW: usize = 4;

/// Bit patterns of every run of [`OVERLAP_WINDOW`] values in a sender's
/// parameters and raw inputs. Runs containing a zero are skipped, since
/// zeros arise everywhere (relu, zero-initialized biases).
#[derive(Debug, Clone, Default)]
pub struct OverlapIndex {
    windows: HashSet<[u64; OVERLAP_WINDOW]>,
}

fn runs(data: &[f64]) -> impl Iterator<Item = [u64; OVERLAP_WINDOW]> + '_ {
    data.windows(OVERLAP_WINDOW).filter(|w| w.iter().all(|&x| x != 0.0)).map(|w| {
        let mut k = [0u64; OVERLAP_WINDOW];
        for (slot, x) in k.iter_mut().zip(w) {
            *slot = x.to_bits();
        }
        k
    })
}

impl OverlapIndex {
    /// Indexes the parameter and raw-input leaves recorded on `tape`.
    pub fn from_tape(tape: &Tape) -> Self {
        let mut idx = OverlapIndex::default();
        for kind in [LeafKind::Parameter, LeafKind::Input] {
            for v in tape.leaves(kind) {
                idx.add(tape.value(v).data());
            }
        }
        idx
    }

    pub fn add(&mut self, data: &[f64]) {
        self.windows.extend(runs(data));
    }

    pub fn hits(&self, payload: &[f64]) -> bool {
        runs(payload).any(|w| self.windows.contains(&w))
    }
}

/// Result of inspecting one outgoing payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inspection {
    pub provenance: Provenance,
    /// The payload contains a verbatim run of the sender's private arrays.
    pub overlap: bool,
}

impl Inspection {
    /// A payload is a copy of private data if it is a pure rearrangement of
    /// parameters or raw inputs, or shares a value run with them.
    pub fn leaks(&self) -> bool {
        matches!(
            self.provenance.passthrough,
            Some(LeafKind::Input) | Some(LeafKind::Parameter)
        ) || self.overlap
    }
}

/// Inspects a payload computed on the sender's tape.
pub fn inspect(tape: &Tape, var: Var, payload: &Tensor, index: &OverlapIndex) -> Inspection {
    Inspection {
        provenance: tape.provenance(var),
        overlap: index.hits(payload.data()),
    }
}

/// Inspects a payload that never lived on a tape (returned gradients).
pub fn inspect_detached(payload: &Tensor, index: &OverlapIndex) -> Inspection {
    Inspection {
        provenance: Provenance::default(),
        overlap: index.hits(payload.data()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Shape,
    Leak,
    Count,
    Unpaired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub direction: Direction,
    pub party: usize,
    pub level: usize,
    pub item: usize,
    pub shape: Vec<usize>,
    pub bytes: usize,
    pub inspection: Inspection,
}

/// Everything that crossed party boundaries during one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub batch: usize,
    /// Per passive party.
    pub forward_messages: Vec<usize>,
    pub backward_messages: Vec<usize>,
    pub forward_values: Vec<usize>,
    pub backward_values: Vec<usize>,
    /// Messages whose shape differed from `N^A × H`.
    pub bad_shapes: usize,
    pub leaks: Vec<String>,
    /// Headers and payloads; kept only for the first captured steps.
    pub headers: Vec<MessageHeader>,
    pub payloads: Vec<Tensor>,
    /// Forward `(party, level, item)` keys lacking a backward partner.
    pub unpaired: Vec<(usize, usize, usize)>,
}

/// Ordered log of all cross-party traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub n_active: usize,
    pub width: usize,
    pub levels: usize,
    pub n_passive: usize,
    /// Steps whose payloads are kept in full.
    pub capture_steps: usize,
    pub steps: Vec<StepLog>,
}

impl Transcript {
    pub fn new(n_active: usize, width: usize, levels: usize, n_passive: usize, capture_steps: usize) -> Self {
        Transcript {
            n_active,
            width,
            levels,
            n_passive,
            capture_steps,
            steps: Vec::new(),
        }
    }

    pub fn begin_step(&mut self, batch: usize) {
        let n = self.n_passive;
        self.steps.push(StepLog {
            step: self.steps.len(),
            batch,
            forward_messages: vec![0; n],
            backward_messages: vec![0; n],
            forward_values: vec![0; n],
            backward_values: vec![0; n],
            bad_shapes: 0,
            leaks: Vec::new(),
            headers: Vec::new(),
            payloads: Vec::new(),
            unpaired: Vec::new(),
        });
    }

    /// Logs a message in the current step.
    pub fn record(&mut self, msg: &Message, inspection: Inspection) {
        let expected = [self.n_active, self.width];
        let capture = self.steps.len() <= self.capture_steps;
        let log = self.steps.last_mut().expect("begin_step called first");
        let party = msg.party.min(log.forward_values.len().saturating_sub(1));
        match msg.direction {
            Direction::ForwardVn => {
                log.forward_messages[party] += 1;
                log.forward_values[party] += msg.n_values();
            }
            Direction::BackwardGrad => {
                log.backward_messages[party] += 1;
                log.backward_values[party] += msg.n_values();
            }
        }
        if msg.payload.shape() != expected {
            log.bad_shapes += 1;
        }
        if inspection.leaks() {
            log.leaks.push(format!(
                "{:?} party {} level {} item {}: {:?}",
                msg.direction, msg.party, msg.level, msg.item, inspection
            ));
        }
        if capture {
            log.headers.push(MessageHeader {
                direction: msg.direction,
                party: msg.party,
                level: msg.level,
                item: msg.item,
                shape: msg.payload.shape().to_vec(),
                bytes: msg.byte_size(),
                inspection,
            });
            log.payloads.push(msg.payload.clone());
        }
    }

    pub fn mark_unpaired(&mut self, key: (usize, usize, usize)) {
        if let Some(log) = self.steps.last_mut() {
            log.unpaired.push(key);
        }
    }

    /// Values one passive party publishes in a forward pass over `batch` samples.
    pub fn expected_forward_values(&self, batch: usize) -> usize {
        batch * self.levels * self.n_active * self.width
    }

    pub fn total_forward_values(&self) -> usize {
        self.steps.iter().flat_map(|s| &s.forward_values).sum()
    }

    pub fn total_backward_values(&self) -> usize {
        self.steps.iter().flat_map(|s| &s.backward_values).sum()
    }
}

/// Outcome of checking a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: usize,
    pub forward_values: usize,
    pub backward_values: usize,
    pub forward_messages: usize,
    pub backward_messages: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies payload shapes, per-step value counts, forward/backward pairing,
/// and the absence of copied private arrays.
pub fn audit(t: &Transcript) -> AuditReport {
    let mut violations = Vec::new();
    let expected_shape = vec![t.n_active, t.width];
    for log in &t.steps {
        let mut push = |kind, detail: String| {
            violations.push(Violation {
                step: log.step,
                kind,
                detail,
            })
        };
        if log.bad_shapes > 0 {
            push(ViolationKind::Shape, format!("{} payloads not shaped {:?}", log.bad_shapes, expected_shape));
        }
        for h in &log.headers {
            if h.shape != expected_shape {
                push(ViolationKind::Shape, format!("{:?} level {} item {} shaped {:?}", h.direction, h.level, h.item, h.shape));
            }
        }
        for leak in &log.leaks {
            push(ViolationKind::Leak, leak.clone());
        }
        let want = t.expected_forward_values(log.batch);
        for p in 0..t.n_passive {
            if log.forward_values[p] != want {
                push(
                    ViolationKind::Count,
                    format!("party {p} sent {} forward values, expected {want}", log.forward_values[p]),
                );
            }
            if log.forward_messages[p] != log.backward_messages[p] {
                push(
                    ViolationKind::Unpaired,
                    format!(
                        "party {p}: {} forward vs {} backward messages",
                        log.forward_messages[p], log.backward_messages[p]
                    ),
                );
            }
        }
        for key in &log.unpaired {
            push(ViolationKind::Unpaired, format!("no backward message for {key:?}"));
        }
    }
    AuditReport {
        steps: t.steps.len(),
        forward_values: t.total_forward_values(),
        backward_values: t.total_backward_values(),
        forward_messages: t.steps.iter().flat_map(|s| &s.forward_messages).sum(),
        backward_messages: t.steps.iter().flat_map(|s| &s.backward_messages).sum(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(direction: Direction, level: usize, item: usize, payload: Tensor) -> Message {
        Message {
            direction,
            party: 0,
            level,
            item,
            payload,
        }
    }

    fn clean() -> Inspection {
        Inspection {
            provenance: Provenance::default(),
            overlap: false,
        }
    }

    #[test]
    fn counts_for_two_levels_ten_steps() {
        let mut t = Transcript::new(5, 32, 2, 1, 1);
        for _ in 0..10 {
            t.begin_step(1);
            for level in 0..2 {
                t.record(&msg(Direction::ForwardVn, level, 0, Tensor::ones(&[5, 32])), clean());
                t.record(&msg(Direction::BackwardGrad, level, 0, Tensor::ones(&[5, 32])), clean());
            }
        }
        let r = audit(&t);
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.forward_values, 3200);
        assert_eq!(r.forward_messages, r.backward_messages);
        assert_eq!(t.steps[0].payloads.len(), 4);
        assert!(t.steps[1].payloads.is_empty());
    }

    #[test]
    fn wrong_shape_and_missing_backward_flagged() {
        let mut t = Transcript::new(5, 32, 1, 1, 0);
        t.begin_step(1);
        t.record(&msg(Direction::ForwardVn, 0, 0, Tensor::ones(&[5, 31])), clean());
        let kinds: Vec<ViolationKind> = audit(&t).violations.into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::Shape));
        assert!(kinds.contains(&ViolationKind::Count));
        assert!(kinds.contains(&ViolationKind::Unpaired));
    }

    #[test]
    fn raw_feature_payload_is_flagged() {
        let mut tape = Tape::new();
        let raw = Tensor::new(vec![5, 32], (0..160).map(|i| 0.1 + i as f64).collect()).unwrap();
        let x = tape.input(raw.clone());
        let y = tape.reshape(x, &[5, 32]).unwrap();
        let index = OverlapIndex::from_tape(&tape);
        let ins = inspect(&tape, y, &raw, &index);
        assert!(ins.leaks());
        assert_eq!(ins.provenance.passthrough, Some(LeafKind::Input));
        assert!(ins.overlap);

        let mut t = Transcript::new(5, 32, 1, 1, 0);
        t.begin_step(1);
        t.record(&msg(Direction::ForwardVn, 0, 0, raw.clone()), ins);
        t.record(&msg(Direction::BackwardGrad, 0, 0, raw), clean());
        let r = audit(&t);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::Leak);
    }

    #[test]
    fn overlap_catches_copied_values_after_arithmetic_provenance() {
        let mut tape = Tape::new();
        let w = tape.parameter(Tensor::new(vec![8], vec![0.3, 0.7, -1.1, 2.5, 0.9, -0.2, 0.4, 1.3]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[8]));
        let y = tape.add(w, zero).unwrap();
        let index = OverlapIndex::from_tape(&tape);
        let ins = inspect(&tape, y, tape.value(y), &index);
        assert_eq!(ins.provenance.passthrough, None);
        assert!(ins.overlap && ins.leaks());
    }

    #[test]
    fn runs_with_zeros_are_ignored() {
        let mut idx = OverlapIndex::default();
        idx.add(&[0.0, 1.0, 2.0, 3.0, 0.0]);
        assert!(!idx.hits(&[0.0, 1.0, 2.0, 3.0]));
    }
}
