use serde::{Deserialize, Serialize};

/// Point-forecast error summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    /// Mean of `|ŷ−y| / ((|y|+|ŷ|)/2)`; zero-denominator terms count as 0.
    #[serde(rename = "SMAPE")]
    pub smape: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Metrics {
        assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
        let n = pred.len().max(1) as f64;
        let (mut abs, mut sq, mut sm) = (0.0, 0.0, 0.0);
        for (&p, &y) in pred.iter().zip(truth) {
            let e = (p - y).abs();
            abs += e;
            sq += e * e;
            let denom = (y.abs() + p.abs()) / 2.0;
            if denom > 0.0 {
                sm += e / denom;
            }
        }
        Metrics {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            smape: sm / n,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 3] {
        [("MAE", self.mae), ("RMSE", self.rmse), ("SMAPE", self.smape)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let m = Metrics::compute(&[2.0, 4.0], &[1.0, 2.0]);
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.rmse, 2.5f64.sqrt());
        let s = Metrics::compute(&[110.0], &[100.0]).smape;
        assert_eq!(s, 10.0 / 105.0);
        assert!((s - 0.0952).abs() < 5e-5);
        let z = Metrics::compute(&[0.0, 3.0], &[0.0, 3.0]);
        assert_eq!((z.mae, z.rmse, z.smape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn json_uses_upper_case_names() {
        let j = serde_json::to_value(Metrics::compute(&[2.0, 4.0], &[1.0, 2.0])).unwrap();
        assert_eq!(j["MAE"], 1.5);
    }
}
