use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradient_check;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_all(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

fn line_coords(n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|i| (i as f64, (i * i) as f64 * 0.3)).collect()
}

#[test]
fn zero_weights_single_step_gives_zero_state() {
    let mut store = ParamStore::new();
    let stack = TemporalStack::new(&mut store, 3, 8, 2, &mut rng());
    zero_all(&mut store);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.input(random(&[4, 3], &mut rng()));
    let h = stack.forward(&mut tape, &p, &[x]).unwrap();
    assert_eq!(tape.shape(h), &[4, 8]);
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn temporal_and_spatial_shapes_for_standard_widths() {
    for hidden in [32, 64, 128] {
        let cfg = ModelConfig {
            hidden,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let model = LocalModel::new(&mut store, &cfg, &line_coords(5), 2, None, &mut rng());
        let mut r = rng();
        let batch = PartyBatch {
            steps: (0..12).map(|_| random(&[5, 2], &mut r)).collect(),
            batch: 1,
            n_series: 5,
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let levels = model.multilevel(&mut tape, &p, &batch).unwrap();
        assert_eq!(levels.len(), 3);
        for l in levels {
            assert_eq!(tape.shape(l), &[1, 5, hidden]);
        }
    }
}

#[test]
fn feature_mismatch_rejected() {
    let mut store = ParamStore::new();
    let stack = TemporalStack::new(&mut store, 3, 8, 1, &mut rng());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.input(Tensor::zeros(&[4, 2]));
    assert!(matches!(
        stack.forward(&mut tape, &p, &[x]),
        Err(TensorError::InvalidArgument { .. })
    ));
}

#[test]
fn temporal_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let stack = TemporalStack::new(&mut store, 2, 6, 2, &mut rng());
    let mut r = rng();
    let xs: Vec<Tensor> = (0..4).map(|_| random(&[3, 2], &mut r)).collect();
    let w0 = store.get(stack.embed.w).clone();
    let report = gradient_check(
        |tape, v| {
            let p = store.bind(tape).with(stack.embed.w, v[0]);
            let steps: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
            let h = stack.forward(tape, &p, &steps)?;
            Ok(tape.sum(h))
        },
        &[w0],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn spatial_pass_through_configuration() {
    let mut store = ParamStore::new();
    let layer = SpatialLayer::new(&mut store, "s", 4, Activation::Linear, &mut rng());
    store.get_mut(layer.w_self).data_mut().fill(0.0);
    *store.get_mut(layer.w_skip) = Tensor::identity(4);
    let h_in = random(&[1, 3, 4], &mut rng());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let adj = tape.constant(Tensor::identity(3).reshape(&[1, 3, 3]).unwrap());
    let h = tape.input(h_in.clone());
    let o = layer.forward(&mut tape, &p, adj, h).unwrap();
    assert_eq!(tape.value(o), &h_in);
}

fn spatial_out(store: &ParamStore, layer: &SpatialLayer, adj: &Tensor, h: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let n = adj.rows();
    let a = tape.constant(adj.clone().reshape(&[1, n, n]).unwrap());
    let x = tape.input(h.clone());
    let o = layer.forward(&mut tape, &p, a, x).unwrap();
    tape.value(o).clone()
}

#[test]
fn two_node_swap_is_equivariant() {
    let mut store = ParamStore::new();
    let layer = SpatialLayer::new(&mut store, "s", 4, Activation::Relu, &mut rng());
    let adj = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let h = random(&[1, 2, 4], &mut rng());
    let mut swapped = h.data()[4..].to_vec();
    swapped.extend_from_slice(&h.data()[..4]);
    let hs = Tensor::new(vec![1, 2, 4], swapped).unwrap();
    let o = spatial_out(&store, &layer, &adj, &h);
    let os = spatial_out(&store, &layer, &adj, &hs);
    assert_eq!(&o.data()[..4], &os.data()[4..]);
    assert_eq!(&o.data()[4..], &os.data()[..4]);
}

proptest::proptest! {
    #[test]
    fn spatial_layer_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..7) {
        use rand::seq::SliceRandom;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = SpatialLayer::new(&mut store, "s", 5, Activation::Relu, &mut r);
        let adj = gaussian_adjacency(&(0..n).map(|_| {
            use rand::Rng;
            (r.random_range(0.0..5.0), r.random_range(0.0..5.0))
        }).collect::<Vec<_>>());
        let h = random(&[1, n, 5], &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let adj_p: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| adj.get(&[perm[i], perm[j]])).collect();
        let h_p: Vec<f64> = (0..n).flat_map(|i| h.data()[perm[i] * 5..perm[i] * 5 + 5].to_vec()).collect();
        let o = spatial_out(&store, &layer, &adj, &h);
        let o_p = spatial_out(&store, &layer, &Tensor::new(vec![n, n], adj_p).unwrap(), &Tensor::new(vec![1, n, 5], h_p).unwrap());
        for i in 0..n {
            for c in 0..5 {
                proptest::prop_assert!((o_p.data()[i * 5 + c] - o.data()[perm[i] * 5 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adjacency_rows_sum_to_one() {
    let mut r = rng();
    for n in [1, 2, 5, 17] {
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                use rand::Rng;
                (r.random_range(0.0..10.0), r.random_range(0.0..10.0))
            })
            .collect();
        let a = gaussian_adjacency(&coords);
        for i in 0..n {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.row(i).iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn zero_head_predicts_zero_and_reshapes() {
    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, 64, 12 * 2, &mut rng());
    zero_all(&mut store);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let h = tape.input(random(&[5, 64], &mut rng()));
    let y = head.forward(&mut tape, &p, h).unwrap();
    let y = tape.reshape(y, &[5, 12, 2]).unwrap();
    assert_eq!(tape.shape(y), &[5, 12, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn head_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, 6, 4, &mut rng());
    let h = random(&[3, 6], &mut rng());
    let points = vec![store.get(head.hidden.w).clone(), store.get(head.out.w).clone(), h];
    let report = gradient_check(
        |tape, v| {
            let p = store.bind(tape).with(head.hidden.w, v[0]).with(head.out.w, v[1]);
            let y = head.forward(tape, &p, v[2])?;
            let y = tape.square(y);
            Ok(tape.sum(y))
        },
        &points,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn passive_forward_reads_only_its_own_leaves() {
    let mut store = ParamStore::new();
    let model = LocalModel::new(&mut store, &ModelConfig::default(), &line_coords(4), 2, None, &mut rng());
    let batch = PartyBatch {
        steps: vec![Tensor::ones(&[4, 2]); 3],
        batch: 1,
        n_series: 4,
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let levels = model.multilevel(&mut tape, &p, &batch).unwrap();
    assert!(tape.leaves(crate::tensor::LeafKind::Received).is_empty());
    for l in levels {
        assert!(!tape.provenance(l).received);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    LocalModel::new(&mut store, &ModelConfig::default(), &line_coords(3), 2, Some(4), &mut rng());
    let manifest = save_checkpoint(dir.path(), &[("active", &store)], serde_json::json!({"seed": 5})).unwrap();
    assert_eq!(manifest.entries.len(), store.len());
    let (loaded, entries) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    let mut other = ParamStore::new();
    LocalModel::new(&mut other, &ModelConfig::default(), &line_coords(3), 2, Some(4), &mut ChaCha8Rng::seed_from_u64(99));
    assert_ne!(other, store);
    other.restore("active", &entries).unwrap();
    assert_eq!(other, store);
}
