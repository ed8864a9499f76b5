//! WebAssembly exports for the static demo page. Every export returns a
//! JSON string so the page needs no generated type bindings.

use hstfl::attacks::{infoleak, whitebox_attack, EmbeddingMap, WhiteboxConfig};
use hstfl::data::distance_matrix;
use hstfl::models::ParamStore;
use hstfl::tensor::{Tape, Tensor, TensorError, Var};
use hstfl::vna::{knn_matrix, DpConfig, VnaConfig, VnaGenerator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn dp(epsilon: f64, delta: f64, clip: f64) -> Result<DpConfig, String> {
    let cfg = DpConfig {
        epsilon: epsilon.is_finite().then_some(epsilon),
        delta,
        clip,
        ..DpConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Calibrated noise scale plus an empirical histogram of `draws` samples.
pub fn noise_summary(epsilon: f64, delta: f64, clip: f64, draws: usize, seed: u64) -> Result<Value, String> {
    let cfg = dp(epsilon, delta, clip)?;
    let Some(noise) = cfg.sample_noise(&[draws.max(1)], &mut ChaCha8Rng::seed_from_u64(seed)) else {
        return Ok(json!({ "sigma": null, "noise_std": 0.0, "empirical_std": 0.0, "bins": [] }));
    };
    let n = noise.len() as f64;
    let mean = noise.sum() / n;
    let std = (noise.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std_target = cfg.noise_std().expect("finite epsilon");
    let (lo, hi, nbins) = (-4.0 * std_target, 4.0 * std_target, 40);
    let mut bins = vec![0usize; nbins];
    for &v in noise.data() {
        if v >= lo && v < hi {
            bins[((v - lo) / (hi - lo) * nbins as f64) as usize] += 1;
        }
    }
    Ok(json!({
        "sigma": cfg.sigma(),
        "noise_std": std_target,
        "empirical_std": std,
        "range": [lo, hi],
        "bins": bins,
    }))
}

#[wasm_bindgen]
pub fn dp_noise_explorer(epsilon: f64, delta: f64, clip: f64, draws: usize, seed: u64) -> String {
    noise_summary(epsilon, delta, clip, draws, seed).map_or_else(error, |v| v.to_string())
}

/// Random sensor layout with its KNN, adaptive, and first-head attention
/// mixing matrices (rows: active series, columns: passive series).
pub fn alignment_summary(n_active: usize, n_passive: usize, k: usize, seed: u64) -> Result<Value, String> {
    if n_active == 0 || n_passive == 0 {
        return Err("both parties need at least one series".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = |n: usize| -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))).collect()
    };
    let (active, passive) = (coords(n_active), coords(n_passive));
    let knn = knn_matrix(&distance_matrix(&active, &passive), k).map_err(|e| e.to_string())?;
    let width = 8;
    let mut store = ParamStore::new();
    let cfg = VnaConfig {
        k,
        n_head: 1,
        rank: 3,
    };
    let gen = VnaGenerator::new(&mut store, 0, knn.clone(), width, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let z: Vec<f64> = (0..n_passive * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = tape.input(Tensor::new(vec![1, n_passive, width], z).map_err(|e| e.to_string())?);
    let adaptive = gen.adaptive_weights(&mut tape, &p).map_err(|e| e.to_string())?;
    let (heads, _) = gen.attention(&mut tape, &p, z).map_err(|e| e.to_string())?;
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        let c = *t.shape().last().expect("matrix");
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    };
    let attention = tape.value(heads[0]);
    // attention keys cover passive then virtual nodes; keep passive columns
    let attention: Vec<Vec<f64>> = rows(attention).into_iter().map(|r| r[..n_passive].to_vec()).collect();
    Ok(json!({
        "active": active,
        "passive": passive,
        "knn": rows(&knn),
        "adaptive": rows(tape.value(adaptive)),
        "attention": attention,
    }))
}

#[wasm_bindgen]
pub fn alignment_view(n_active: usize, n_passive: usize, k: usize, seed: u64) -> String {
    alignment_summary(n_active, n_passive, k, seed).map_or_else(error, |v| v.to_string())
}

/// `x ↦ clip_rows(x · W, C)` on `[T, F]` windows, one output row per sample.
struct ClippedLinear {
    w: Tensor,
    steps: usize,
    features: usize,
    clip: f64,
}

impl EmbeddingMap for ClippedLinear {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.steps, self.features]
    }

    fn time_axis(&self) -> usize {
        0
    }

    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let b = tape.shape(x)[0];
        let flat = tape.reshape(x, &[b, self.steps * self.features])?;
        let w = tape.constant(self.w.clone());
        let y = tape.matmul(flat, w)?;
        tape.clip_rows(y, self.clip)
    }
}

/// White-box InfoLeak against a clipped linear publication at each ε.
pub fn inversion_summary(epsilons: &[f64], samples: usize, seed: u64) -> Result<Value, String> {
    let (steps, features, out) = (6, 2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let w: Vec<f64> = randn(steps * features * out).into_iter().map(|v| v / 12f64.sqrt()).collect();
    let map = ClippedLinear {
        w: Tensor::new(vec![steps * features, out], w).map_err(|e| e.to_string())?,
        steps,
        features,
        clip: 4.0,
    };
    let truth: Vec<Tensor> = (0..samples.max(1))
        .map(|_| Tensor::new(vec![steps, features], randn(steps * features)).expect("shape"))
        .collect();
    let mut tape = Tape::new();
    let stacked: Vec<f64> = truth.iter().flat_map(|t| t.data().to_vec()).collect();
    let x = tape.constant(Tensor::new(vec![truth.len(), steps, features], stacked).map_err(|e| e.to_string())?);
    let clean = map.embed(&mut tape, x).map_err(|e| e.to_string())?;
    let clean = tape.value(clean).clone();
    let mut points = Vec::new();
    for &eps in epsilons {
        let cfg = dp(eps, 1e-4, map.clip)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ eps.to_bits());
        let target = match cfg.sample_noise(clean.shape(), &mut noise_rng) {
            Some(n) => Tensor::new(clean.shape().to_vec(), clean.data().iter().zip(n.data()).map(|(a, b)| a + b).collect())
                .expect("same shape"),
            None => clean.clone(),
        };
        let wb = WhiteboxConfig {
            steps: 300,
            ..WhiteboxConfig::default()
        };
        let recon = whitebox_attack(&map, &target, &wb, &mut noise_rng).map_err(|e| e.to_string())?;
        points.push(json!({ "epsilon": if eps.is_finite() { json!(eps) } else { json!("inf") }, "infoleak": infoleak(&truth, &recon) }));
    }
    Ok(json!({ "points": points }))
}

/// `epsilons_json` is a JSON array of numbers; `null` or `"inf"` means no noise.
#[wasm_bindgen]
pub fn inversion_vs_epsilon(epsilons_json: &str, samples: usize, seed: u64) -> String {
    let parsed: Result<Vec<Value>, _> = serde_json::from_str(epsilons_json);
    let eps: Result<Vec<f64>, String> = match parsed {
        Err(e) => Err(e.to_string()),
        Ok(vals) => vals
            .into_iter()
            .map(|v| match v {
                Value::Null => Ok(f64::INFINITY),
                Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                Value::Number(n) => n.as_f64().ok_or_else(|| "bad number".to_string()),
                other => Err(format!("not an epsilon: {other}")),
            })
            .collect(),
    };
    eps.and_then(|e| inversion_summary(&e, samples, seed))
        .map_or_else(error, |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_matches_calibration() {
        let v = noise_summary(8.0, 1e-4, 1.0, 20_000, 1).unwrap();
        let (emp, target) = (v["empirical_std"].as_f64().unwrap(), v["noise_std"].as_f64().unwrap());
        assert!((emp / target - 1.0).abs() < 0.03, "{emp} vs {target}");
        let inf: Value = serde_json::from_str(&dp_noise_explorer(f64::INFINITY, 1e-4, 1.0, 10, 1)).unwrap();
        assert_eq!(inf["noise_std"], 0.0);
        let bad: Value = serde_json::from_str(&dp_noise_explorer(-1.0, 1e-4, 1.0, 10, 1)).unwrap();
        assert!(bad["error"].is_string());
    }

    #[test]
    fn alignment_matrices_are_row_stochastic() {
        let v = alignment_summary(4, 6, 2, 3).unwrap();
        for key in ["adaptive", "attention"] {
            for row in v[key].as_array().unwrap() {
                let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
                assert!(s <= 1.0 + 1e-9, "{key}");
            }
        }
        for row in v["knn"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert_eq!(s, 2.0);
        }
    }

    #[test]
    fn leakage_drops_with_heavy_noise() {
        let v: Value = serde_json::from_str(&inversion_vs_epsilon("[\"inf\", 1]", 4, 5)).unwrap();
        let p = v["points"].as_array().unwrap();
        assert!(p[0]["infoleak"].as_f64().unwrap() > p[1]["infoleak"].as_f64().unwrap());
        assert!(serde_json::from_str::<Value>(&inversion_vs_epsilon("[true]", 1, 1)).unwrap()["error"].is_string());
    }
}
