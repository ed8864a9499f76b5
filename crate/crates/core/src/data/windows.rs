use serde::{Deserialize, Serialize};

use super::{preprocess, DataError, ScalerState, SplitRatios, TimeSeriesPanel};
use crate::tensor::Tensor;

/// History and horizon lengths, in active-party steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
}

impl WindowSpec {
    /// Passive history covering the same wall-clock span as the active one.
    pub fn passive_history(&self, active: &TimeSeriesPanel, passive: &TimeSeriesPanel) -> Result<usize, DataError> {
        let span = self.history as u64 * active.sampling_minutes as u64;
        let rate = passive.sampling_minutes as u64;
        if span % rate != 0 || span < rate {
            return Err(DataError::Window(format!(
                "active span of {span} minutes is not a positive multiple of the passive {rate}-minute rate"
            )));
        }
        Ok((span / rate) as usize)
    }
}

/// Model-ready inputs for one party and a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyBatch {
    /// One `[batch·series, features]` tensor per history step, oldest first.
    pub steps: Vec<Tensor>,
    pub batch: usize,
    pub n_series: usize,
}

/// Aligned samples of one chronological split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub spec: WindowSpec,
    pub active: TimeSeriesPanel,
    pub passives: Vec<TimeSeriesPanel>,
    pub passive_history: Vec<usize>,
    /// Active step of the first label of each sample.
    origins: Vec<usize>,
    /// Per sample and passive party: exclusive end step of its window.
    passive_ends: Vec<Vec<usize>>,
}

impl SplitData {
    /// Enumerates every origin whose active history, labels, and passive
    /// history all fall inside the given panels. A passive window holds the
    /// latest steps stamped strictly before the origin.
    pub fn build(
        active: TimeSeriesPanel,
        passives: Vec<TimeSeriesPanel>,
        spec: WindowSpec,
    ) -> Result<Self, DataError> {
        if spec.history == 0 || spec.horizon == 0 {
            return Err(DataError::Window("history and horizon must be positive".into()));
        }
        if active.output_features.is_empty() {
            return Err(DataError::Window("active panel declares no output features".into()));
        }
        let passive_history = passives
            .iter()
            .map(|p| spec.passive_history(&active, p))
            .collect::<Result<Vec<_>, _>>()?;
        let mut origins = Vec::new();
        let mut passive_ends = Vec::new();
        for t in spec.history..=active.n_steps.saturating_sub(spec.horizon) {
            let ts = active.timestamp(t);
            let mut ends = Vec::with_capacity(passives.len());
            for (p, &hist) in passives.iter().zip(&passive_history) {
                let elapsed = ts - p.start_minute;
                if elapsed <= 0 {
                    break;
                }
                let rate = p.sampling_minutes as i64;
                let end = ((elapsed + rate - 1) / rate) as usize;
                if end < hist || end > p.n_steps {
                    break;
                }
                ends.push(end);
            }
            if ends.len() == passives.len() {
                origins.push(t);
                passive_ends.push(ends);
            }
        }
        if origins.is_empty() {
            return Err(DataError::Window(format!(
                "no complete window of history {} and horizon {} in {} steps",
                spec.history, spec.horizon, active.n_steps
            )));
        }
        Ok(SplitData {
            spec,
            active,
            passives,
            passive_history,
            origins,
            passive_ends,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn n_passive(&self) -> usize {
        self.passives.len()
    }

    pub fn origin(&self, sample: usize) -> usize {
        self.origins[sample]
    }

    fn gather(panel: &TimeSeriesPanel, starts: &[usize], len: usize) -> PartyBatch {
        let (n, f) = (panel.n_series(), panel.n_features);
        let steps = (0..len)
            .map(|k| {
                let mut data = Vec::with_capacity(starts.len() * n * f);
                for &s0 in starts {
                    for s in 0..n {
                        data.extend_from_slice(panel.observation(s, s0 + k));
                    }
                }
                Tensor::new(vec![starts.len() * n, f], data).expect("non-empty batch")
            })
            .collect();
        PartyBatch {
            steps,
            batch: starts.len(),
            n_series: n,
        }
    }

    pub fn active_batch(&self, samples: &[usize]) -> PartyBatch {
        let starts: Vec<usize> = samples.iter().map(|&i| self.origins[i] - self.spec.history).collect();
        Self::gather(&self.active, &starts, self.spec.history)
    }

    pub fn passive_batch(&self, party: usize, samples: &[usize]) -> PartyBatch {
        let hist = self.passive_history[party];
        let starts: Vec<usize> = samples.iter().map(|&i| self.passive_ends[i][party] - hist).collect();
        Self::gather(&self.passives[party], &starts, hist)
    }

    /// Targets of shape `[batch, N^A, horizon·F_out]`, step-major per series.
    pub fn labels(&self, samples: &[usize]) -> Tensor {
        let a = &self.active;
        let out = &a.output_features;
        let mut data = Vec::with_capacity(samples.len() * a.n_series() * self.spec.horizon * out.len());
        for &i in samples {
            let t0 = self.origins[i];
            for s in 0..a.n_series() {
                for t in t0..t0 + self.spec.horizon {
                    data.extend(out.iter().map(|&f| a.value(s, t, f)));
                }
            }
        }
        Tensor::new(vec![samples.len(), a.n_series(), self.spec.horizon * out.len()], data)
            .expect("non-empty batch")
    }

    /// Passive history of one sample as `[N^P, T^P, F^P]`.
    pub fn passive_window(&self, party: usize, sample: usize) -> Tensor {
        let p = &self.passives[party];
        let hist = self.passive_history[party];
        let end = self.passive_ends[sample][party];
        let mut data = Vec::with_capacity(p.n_series() * hist * p.n_features);
        for s in 0..p.n_series() {
            for t in end - hist..end {
                data.extend_from_slice(p.observation(s, t));
            }
        }
        Tensor::new(vec![p.n_series(), hist, p.n_features], data).expect("non-empty window")
    }
}

/// Preprocessed, windowed train/valid/test splits for all parties.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: SplitData,
    pub valid: SplitData,
    pub test: SplitData,
    pub active_scaler: ScalerState,
    pub passive_scalers: Vec<ScalerState>,
}

impl PreparedData {
    pub fn split(&self, name: &str) -> Option<&SplitData> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Normalizes every party on its own training split, then windows each split.
pub fn prepare(
    active: &TimeSeriesPanel,
    passives: &[TimeSeriesPanel],
    ratios: SplitRatios,
    spec: WindowSpec,
) -> Result<PreparedData, DataError> {
    let (a_train, a_valid, a_test, active_scaler) = preprocess(active, ratios)?;
    let mut p_splits = (Vec::new(), Vec::new(), Vec::new());
    let mut passive_scalers = Vec::new();
    for p in passives {
        let (tr, va, te, sc) = preprocess(p, ratios)?;
        p_splits.0.push(tr);
        p_splits.1.push(va);
        p_splits.2.push(te);
        passive_scalers.push(sc);
    }
    Ok(PreparedData {
        train: SplitData::build(a_train, p_splits.0, spec)?,
        valid: SplitData::build(a_valid, p_splits.1, spec)?,
        test: SplitData::build(a_test, p_splits.2, spec)?,
        active_scaler,
        passive_scalers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn panels(ratio: usize) -> (TimeSeriesPanel, TimeSeriesPanel) {
        generate_synthetic(&SyntheticConfig {
            steps: 200,
            passive_step_ratio: ratio,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn shapes_and_alignment_equal_rates() {
        let (a, p) = panels(1);
        let spec = WindowSpec { history: 8, horizon: 4 };
        let d = SplitData::build(a.clone(), vec![p.clone()], spec).unwrap();
        assert_eq!(d.len(), 200 - 8 - 4 + 1);
        let ab = d.active_batch(&[0, 3]);
        assert_eq!(ab.steps.len(), 8);
        assert_eq!(ab.steps[0].shape(), &[2 * 6, 2]);
        let pb = d.passive_batch(0, &[0, 3]);
        assert_eq!(pb.steps[0].shape(), &[2 * 8, 2]);
        // first passive step of sample 0 is step 0
        assert_eq!(pb.steps[0].row(0), p.observation(0, 0));
        assert_eq!(d.labels(&[0]).shape(), &[1, 6, 4]);
        assert_eq!(d.labels(&[0]).data()[0], a.value(0, 8, 0));
    }

    #[test]
    fn passive_window_never_reaches_origin_time() {
        let (a, p) = panels(2);
        let spec = WindowSpec { history: 8, horizon: 4 };
        let d = SplitData::build(a, vec![p], spec).unwrap();
        assert_eq!(d.passive_history, vec![4]);
        for i in 0..d.len() {
            let origin_ts = d.active.timestamp(d.origin(i));
            let end = d.passive_ends[i][0];
            assert!(d.passives[0].timestamp(end - 1) < origin_ts);
            assert!(end == d.passives[0].n_steps || d.passives[0].timestamp(end) >= origin_ts);
        }
    }

    #[test]
    fn incompatible_rates_rejected() {
        let (a, p) = panels(3);
        let spec = WindowSpec { history: 8, horizon: 4 };
        assert!(matches!(SplitData::build(a, vec![p], spec), Err(DataError::Window(_))));
    }

    #[test]
    fn passive_window_matches_batch() {
        let (a, p) = panels(1);
        let d = SplitData::build(a, vec![p], WindowSpec { history: 5, horizon: 2 }).unwrap();
        let w = d.passive_window(0, 7);
        let b = d.passive_batch(0, &[7]);
        for t in 0..5 {
            for s in 0..8 {
                assert_eq!(b.steps[t].row(s), &w.data()[(s * 5 + t) * 2..(s * 5 + t) * 2 + 2]);
            }
        }
    }

    #[test]
    fn prepared_splits_are_finite() {
        let (a, p) = panels(1);
        let d = prepare(&a, &[p], SplitRatios::default(), WindowSpec { history: 8, horizon: 4 }).unwrap();
        assert_eq!(d.train.active.n_steps, 160);
        assert!(d.test.active.all_finite() && d.test.passives[0].all_finite());
        assert!(!d.valid.is_empty());
    }
}
