use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradient_check;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reference selection: full sort of each column, then the first k.
fn knn_oracle(delta: &Tensor, k: usize) -> Tensor {
    let (np, na) = (delta.shape()[0], delta.shape()[1]);
    let mut out = Tensor::zeros(&[na, np]);
    for j in 0..na {
        let mut col: Vec<(f64, usize)> = (0..np).map(|i| (delta.get(&[i, j]), i)).collect();
        col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &col[..k] {
            out.data_mut()[j * np + i] = 1.0;
        }
    }
    out
}

#[test]
fn knn_small_example() {
    let delta = Tensor::from_rows(&[vec![1.0, 4.0], vec![2.0, 3.0], vec![6.0, 5.0]]).unwrap();
    let m = knn_matrix(&delta, 2).unwrap();
    assert_eq!(m, Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap());
}

#[test]
fn knn_all_selected_when_k_is_np() {
    let delta = random(&[4, 3], &mut ChaCha8Rng::seed_from_u64(1)).map(f64::abs);
    assert_eq!(knn_matrix(&delta, 4).unwrap(), Tensor::ones(&[3, 4]));
}

#[test]
fn knn_tie_goes_to_lower_index() {
    let delta = Tensor::from_rows(&[vec![2.0], vec![2.0], vec![3.0]]).unwrap();
    assert_eq!(knn_matrix(&delta, 1).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn knn_rejects_bad_k() {
    let delta = Tensor::ones(&[3, 2]);
    assert_eq!(knn_matrix(&delta, 0), Err(VnaError::KOutOfRange { k: 0, n_passive: 3 }));
    assert!(knn_matrix(&delta, 4).is_err());
}

#[test]
fn knn_matches_sort_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let np = rng.random_range(1..12);
        let na = rng.random_range(1..12);
        let k = rng.random_range(1..=np);
        // coarse grid makes ties common
        let data = (0..np * na).map(|_| rng.random_range(0..6) as f64).collect();
        let delta = Tensor::new(vec![np, na], data).unwrap();
        let m = knn_matrix(&delta, k).unwrap();
        assert_eq!(m, knn_oracle(&delta, k));
        for j in 0..na {
            assert_eq!(m.row(j).iter().sum::<f64>(), k as f64);
        }
    }
}

fn generator(np: usize, na: usize, width: usize, k: usize, seed: u64) -> (ParamStore, VnaGenerator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = random(&[np, na], &mut rng).map(f64::abs);
    let knn = knn_matrix(&delta, k).unwrap();
    let mut store = ParamStore::new();
    let cfg = VnaConfig { k, n_head: 2, rank: 4 };
    let g = VnaGenerator::new(&mut store, 0, knn, width, &cfg, &mut rng).unwrap();
    (store, g)
}

#[test]
fn distance_with_k1_identity_copies_nearest() {
    let delta = Tensor::from_rows(&[vec![1.0, 9.0], vec![5.0, 0.5], vec![7.0, 7.0]]).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = VnaGenerator::new(&mut store, 0, knn_matrix(&delta, 1).unwrap(), 4, &VnaConfig::default(), &mut rng).unwrap();
    *store.get_mut(g.w_dis.w) = Tensor::identity(4);
    let z = random(&[1, 3, 4], &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let zv = tape.input(z.clone());
    let v = g.distance(&mut tape, &p, zv).unwrap();
    assert_eq!(&tape.value(v).data()[..4], &z.data()[..4]);
    assert_eq!(&tape.value(v).data()[4..], &z.data()[4..8]);
}

#[test]
fn distance_of_zero_input_is_bias() {
    let (mut store, g) = generator(3, 2, 16, 2, 4);
    let bias = Tensor::new(vec![16], (0..16).map(f64::from).collect()).unwrap();
    *store.get_mut(g.w_dis.b.unwrap()) = bias.clone();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let z = tape.input(Tensor::zeros(&[1, 3, 16]));
    let v = g.distance(&mut tape, &p, z).unwrap();
    assert_eq!(tape.shape(v), &[1, 2, 16]);
    for r in 0..2 {
        assert_eq!(&tape.value(v).data()[r * 16..(r + 1) * 16], bias.data());
    }
}

#[test]
fn adaptive_uniform_when_scores_vanish() {
    let (mut store, g) = generator(4, 3, 8, 2, 5);
    store.get_mut(g.w_a1).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let m = g.adaptive_weights(&mut tape, &p).unwrap();
    assert_eq!(tape.shape(m), &[3, 4]);
    assert!(tape.value(m).data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
}

#[test]
fn mixing_matrices_are_row_stochastic() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let np = rng.random_range(2..9);
        let na = rng.random_range(2..9);
        let (store, g) = generator(np, na, 8, 1, seed);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.input(random(&[2, np, 8], &mut rng).map(|x| 5.0 * x));
        let m = g.adaptive_weights(&mut tape, &p).unwrap();
        let (atts, _) = g.attention(&mut tape, &p, z).unwrap();
        for a in std::iter::once(m).chain(atts) {
            let t = tape.value(a);
            for r in 0..t.len() / t.cols() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_shapes() {
    let (store, g) = generator(3, 2, 16, 2, 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let z = tape.input(random(&[1, 3, 16], &mut ChaCha8Rng::seed_from_u64(1)));
    let (atts, _) = g.attention(&mut tape, &p, z).unwrap();
    assert_eq!(atts.len(), 2);
    for a in atts {
        assert_eq!(tape.shape(a), &[1, 2, 5]);
    }
    let v = g.dynamic(&mut tape, &p, z).unwrap();
    assert_eq!(tape.shape(v), &[1, 2, 16]);
}

#[test]
fn dynamic_with_zero_input_depends_only_on_parameters() {
    let (store, g) = generator(3, 2, 8, 2, 7);
    let run = || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.input(Tensor::zeros(&[1, 3, 8]));
        let v = g.dynamic(&mut tape, &p, z).unwrap();
        tape.value(v).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn adaptive_gradient_wrt_a1_matches_finite_differences() {
    let (store, g) = generator(4, 3, 6, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random(&[2, 4, 6], &mut rng);
    let report = gradient_check(
        |tape, v| {
            let p = store.bind(tape).with(g.w_a1, v[0]);
            let zv = tape.input(z.clone());
            let out = g.adaptive(tape, &p, zv)?;
            let out = tape.square(out);
            Ok(tape.sum(out))
        },
        &[store.get(g.w_a1).clone()],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn dynamic_gradient_matches_finite_differences() {
    let (store, g) = generator(3, 2, 6, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&[2, 3, 6], &mut rng);
    let report = gradient_check(
        |tape, v| {
            let p = store.bind(tape).with(g.heads[0].q.w, v[0]).with(g.x_zp, v[1]);
            let out = g.dynamic(tape, &p, v[2])?;
            let out = tape.square(out);
            Ok(tape.sum(out))
        },
        &[store.get(g.heads[0].q.w).clone(), store.get(g.x_zp).clone(), z],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn fuse_values(a: f64, b: f64, c: f64) -> f64 {
    let mut tape = Tape::new();
    let [x, y, z] = [a, b, c].map(|v| tape.input(Tensor::filled(&[1, 1], v)));
    let f = fuse_virtual_node(&mut tape, x, y, z).unwrap();
    tape.value(f).data()[0]
}

#[test]
fn fusion_examples() {
    assert_eq!(fuse_values(0.0, 0.0, 0.0), 0.0);
    assert_eq!(fuse_values(-5.0, 1.0, 1.0), 0.0);
    assert_eq!(fuse_values(1.0, 2.0, 3.0), 6.0);
}

#[test]
fn sigma_for_epsilon_8() {
    let dp = DpConfig::with_epsilon(Some(8.0));
    let expected = (2.0 * 12500f64.ln()).sqrt() / 8.0;
    assert!((dp.sigma().unwrap() - expected).abs() < 1e-15);
    assert!((dp.noise_std().unwrap() - 0.5430).abs() < 5e-5);
    assert_eq!(DpConfig::default().sigma(), None);
}

#[test]
fn empirical_noise_std_within_two_percent() {
    let dp = DpConfig::with_epsilon(Some(8.0));
    let noise = dp.sample_noise(&[1000, 1000], &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let n = noise.len() as f64;
    let mean = noise.sum() / n;
    let var = noise.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let target = dp.noise_std().unwrap();
    assert!((var.sqrt() / target - 1.0).abs() < 0.02);
}

#[test]
fn infinite_epsilon_only_clips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random(&[6, 5], &mut rng).map(|x| 3.0 * x);
    let mut tape = Tape::new();
    let x = tape.input(v.clone());
    let (clipped, published) = dp_protect(&mut tape, x, &DpConfig::default(), true, &mut rng).unwrap();
    assert_eq!(clipped, published);
    for r in 0..6 {
        let norm = tape.value(published).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-12);
    }
    assert_eq!(protect_tensor(&v, &DpConfig::default(), &mut rng), tape.value(published).clone());
}

#[test]
fn short_rows_pass_clipping_unchanged() {
    let v = Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap();
    let out = protect_tensor(&v, &DpConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(out, v);
}

#[test]
fn noise_is_a_constant_for_backward() {
    let dp = DpConfig::with_epsilon(Some(1.0));
    let v = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.05, -0.1]]).unwrap();
    let mut tape = Tape::new();
    let x = tape.variable(v);
    let (_, published) = dp_protect(&mut tape, x, &dp, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = tape.sum(published);
    let g = tape.backward(s).unwrap();
    // rows inside the bound: the whole map is identity plus a constant
    assert_eq!(g.wrt(x, &[2, 2]).data(), &[1.0; 4]);
}

#[test]
fn clip_gradient_matches_finite_differences_off_boundary() {
    let v = Tensor::from_rows(&[vec![1.5, -2.0, 0.7], vec![0.1, 0.2, -0.3]]).unwrap();
    let w = Tensor::from_rows(&[vec![0.3, 1.0, -0.4], vec![2.0, 0.5, 1.1]]).unwrap();
    let report = gradient_check(
        |tape, vars| {
            let c = tape.clip_rows(vars[0], 1.0)?;
            let wv = tape.constant(w.clone());
            let m = tape.mul(c, wv)?;
            Ok(tape.sum(m))
        },
        &[v],
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed && report.excluded.is_empty(), "{report:?}");
}

#[test]
fn epsilon_json_forms() {
    let a: DpConfig = serde_json::from_str(r#"{"epsilon": "inf"}"#).unwrap();
    let b: DpConfig = serde_json::from_str(r#"{"epsilon": null}"#).unwrap();
    let c: DpConfig = serde_json::from_str(r#"{"epsilon": 4}"#).unwrap();
    assert_eq!((a.epsilon, b.epsilon, c.epsilon), (None, None, Some(4.0)));
    let back: DpConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    assert!(serde_json::from_str::<DpConfig>(r#"{"epsilon": 4, "sigma": 1}"#).is_err());
}

fn gate_run(store: &ParamStore, gate: &Gate, v: &Tensor, o: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (vv, ov) = (tape.input(v.clone()), tape.input(o.clone()));
    let (h, g) = gate.forward(&mut tape, &p, vv, ov).unwrap();
    (tape.value(h).clone(), tape.value(g).clone())
}

#[test]
fn gate_limits_and_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let gate = Gate::new(&mut store, "gate", 4, &mut rng);
    let v = random(&[3, 4], &mut rng);
    let o = random(&[3, 4], &mut rng);

    let (h, _) = gate_run(&store, &gate, &o, &o);
    assert!(h.max_abs_diff(&o) < 1e-15);

    let (h, _) = gate_run(&store, &gate, &v, &o);
    for i in 0..h.len() {
        let (a, b) = (v.data()[i], o.data()[i]);
        assert!(h.data()[i] >= a.min(b) - 1e-15 && h.data()[i] <= a.max(b) + 1e-15);
    }

    store.get_mut(gate.from_virtual.w).data_mut().fill(0.0);
    store.get_mut(gate.from_local.w).data_mut().fill(0.0);
    store.get_mut(gate.from_virtual.b.unwrap()).data_mut().fill(1e3);
    let (h, g) = gate_run(&store, &gate, &v, &o);
    assert!(g.data().iter().all(|&x| x == 1.0));
    assert_eq!(h, o);

    store.get_mut(gate.from_virtual.b.unwrap()).data_mut().fill(-1e3);
    let (h, _) = gate_run(&store, &gate, &v, &o);
    assert_eq!(h, v);
}
