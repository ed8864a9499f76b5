use serde::{Deserialize, Serialize};

use super::{DataError, TimeSeriesPanel};

const STD_FLOOR: f64 = 1e-8;

/// Chronological train/valid/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8,
            valid: 1,
            test: 1,
        }
    }
}

/// Step counts of the three splits; the test split takes the remainder.
pub fn split_lengths(n_steps: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    let total = (ratios.train + ratios.valid + ratios.test) as usize;
    let train = n_steps * ratios.train as usize / total;
    let valid = n_steps * ratios.valid as usize / total;
    (train, valid, n_steps - train - valid)
}

/// Per-feature z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerState {
    pub fn fit(panel: &TimeSeriesPanel) -> Self {
        let f = panel.n_features;
        let mut mean = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let count = (panel.n_series() * panel.n_steps) as f64;
        for obs in panel.values.chunks(f) {
            for (m, v) in mean.iter_mut().zip(obs) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for obs in panel.values.chunks(f) {
            for ((s, v), m) in sq.iter_mut().zip(obs).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
        ScalerState { mean, std }
    }

    pub fn transform(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn inverse(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    pub fn apply(&self, panel: &mut TimeSeriesPanel) {
        let f = panel.n_features;
        for obs in panel.values.chunks_mut(f) {
            for (i, v) in obs.iter_mut().enumerate() {
                *v = self.transform(i, *v);
            }
        }
    }

    pub fn invert(&self, panel: &mut TimeSeriesPanel) {
        let f = panel.n_features;
        for obs in panel.values.chunks_mut(f) {
            for (i, v) in obs.iter_mut().enumerate() {
                *v = self.inverse(i, *v);
            }
        }
    }
}

/// Fills `NaN` gaps per series and feature by linear interpolation; leading
/// and trailing gaps take the nearest observed value.
pub fn interpolate_missing(panel: &mut TimeSeriesPanel) -> Result<(), DataError> {
    let (t, f) = (panel.n_steps, panel.n_features);
    for s in 0..panel.n_series() {
        for feat in 0..f {
            let get = |p: &TimeSeriesPanel, i: usize| p.value(s, i, feat);
            let known: Vec<usize> = (0..t).filter(|&i| get(panel, i).is_finite()).collect();
            let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
                return Err(DataError::SeriesAllMissing(panel.series_ids[s].clone()));
            };
            for i in 0..first {
                let v = get(panel, first);
                panel.set(s, i, feat, v);
            }
            for i in last + 1..t {
                let v = get(panel, last);
                panel.set(s, i, feat, v);
            }
            for pair in known.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let (va, vb) = (get(panel, a), get(panel, b));
                for i in a + 1..b {
                    let w = (i - a) as f64 / (b - a) as f64;
                    panel.set(s, i, feat, va + w * (vb - va));
                }
            }
        }
    }
    Ok(())
}

/// Interpolates, splits chronologically, and z-normalizes with statistics
/// from the training split only.
pub fn preprocess(
    panel: &TimeSeriesPanel,
    ratios: SplitRatios,
) -> Result<(TimeSeriesPanel, TimeSeriesPanel, TimeSeriesPanel, ScalerState), DataError> {
    let mut filled = panel.clone();
    interpolate_missing(&mut filled)?;
    let (n_train, n_valid, n_test) = split_lengths(filled.n_steps, ratios);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(DataError::Window(format!(
            "{} steps cannot be split {}:{}:{}",
            filled.n_steps, ratios.train, ratios.valid, ratios.test
        )));
    }
    let mut train = filled.time_slice(0, n_train);
    let mut valid = filled.time_slice(n_train, n_train + n_valid);
    let mut test = filled.time_slice(n_train + n_valid, filled.n_steps);
    let scaler = ScalerState::fit(&train);
    for p in [&mut train, &mut valid, &mut test] {
        scaler.apply(p);
    }
    Ok((train, valid, test, scaler))
}
