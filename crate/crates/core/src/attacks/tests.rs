use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::data::{generate_synthetic, prepare, PreparedData, SplitRatios, SyntheticConfig, WindowSpec};
use crate::protocol::{Federation, FederationSetup, TrainConfig};
use crate::tensor::{Tape, TensorError, Var};
use crate::vna::{DpConfig, VnaConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

fn stack(samples: &[Tensor]) -> Tensor {
    let mut shape = vec![samples.len()];
    shape.extend(samples[0].shape());
    Tensor::new(shape, samples.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap()
}

#[test]
fn infoleak_examples() {
    let x = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
    assert_eq!(infoleak(&x, &x), 1.0);
    let off = vec![Tensor::new(vec![2], vec![1.0, 3.0]).unwrap()];
    assert_eq!(infoleak(&x, &off), 0.5);
}

proptest! {
    #[test]
    fn infoleak_is_bounded_and_strictly_decreasing(a in 0.0f64..1e3, gap in 1e-6f64..1e3) {
        let (la, lb) = (infoleak_from_distance(a), infoleak_from_distance(a + gap));
        prop_assert!(la > 0.0 && la <= 1.0);
        prop_assert!(lb < la);
    }
}

fn linear_targets(map: &LinearMap, truth: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(stack(truth));
    let y = map.embed(&mut tape, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn identity_map_is_inverted_exactly() {
    let mut r = rng(1);
    let (t, f) = (8, 4);
    let map = LinearMap::new(Tensor::identity(t * f), t, f);
    let truth: Vec<Tensor> = (0..4).map(|_| randn(&[t, f], &mut r)).collect();
    let recon = whitebox_attack(&map, &linear_targets(&map, &truth), &WhiteboxConfig::default(), &mut r).unwrap();
    let leak = infoleak(&truth, &recon);
    assert!(leak >= 0.99, "{leak}");
}

#[test]
fn invertible_linear_maps_are_inverted() {
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let (t, f) = (6, 2);
        let n = t * f;
        // random rotations around singular values in [0.5, 2]
        let q = |r: &mut ChaCha8Rng| DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(r)).qr().q();
        let (u, v) = (q(&mut r), q(&mut r));
        let s = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 0.5 + 1.5 * i as f64 / (n - 1) as f64));
        let m: DMatrix<f64> = u * s * v.transpose();
        let w = Tensor::new(vec![n, n], (0..n * n).map(|k| m[(k / n, k % n)]).collect()).unwrap();
        let map = LinearMap::new(w, t, f);
        let truth: Vec<Tensor> = (0..3).map(|_| randn(&[t, f], &mut r)).collect();
        let recon = whitebox_attack(&map, &linear_targets(&map, &truth), &WhiteboxConfig::default(), &mut r).unwrap();
        let leak = infoleak(&truth, &recon);
        assert!(leak >= 0.99, "seed {seed}: {leak}");
    }
}

struct Poisoned;

impl EmbeddingMap for Poisoned {
    fn input_shape(&self) -> Vec<usize> {
        vec![3, 1]
    }
    fn time_axis(&self) -> usize {
        0
    }
    fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        Ok(tape.scale(x, f64::NAN))
    }
}

#[test]
fn non_finite_objective_fails_after_restart() {
    let err = whitebox_attack(&Poisoned, &Tensor::zeros(&[1, 3, 1]), &WhiteboxConfig::default(), &mut rng(0)).unwrap_err();
    assert!(matches!(err, AttackError::NonFinite { step: 0 }), "{err}");
}

#[test]
fn baselines() {
    let mut r = rng(2);
    let truth: Vec<Tensor> = (0..200).map(|_| randn(&[50], &mut r)).collect();
    let mean = baseline_attack(AttackKind::Mean, &truth, GuessDistribution::Normal, &mut r).unwrap();
    assert!(mean.reconstructed.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    // E‖x‖ ≈ √50 and E‖x − g‖ ≈ √100 for independent unit-variance draws
    assert!((mean.mean_distance - 50f64.sqrt()).abs() < 0.3, "{}", mean.mean_distance);
    for g in [GuessDistribution::Normal, GuessDistribution::Uniform] {
        let guess = baseline_attack(AttackKind::RandomGuess, &truth, g, &mut r).unwrap();
        assert!((guess.mean_distance - 10.0).abs() < 0.4, "{g:?}: {}", guess.mean_distance);
        assert!(guess.lambda < mean.lambda);
        assert_eq!(guess.guess, Some(g));
    }
    let uni = baseline_attack(AttackKind::RandomGuess, &truth, GuessDistribution::Uniform, &mut r).unwrap();
    assert!(uni.reconstructed.iter().all(|t| t.data().iter().all(|v| v.abs() <= 3f64.sqrt())));
    assert!(baseline_attack(AttackKind::WhiteBox, &truth, GuessDistribution::Normal, &mut r).is_err());
}

#[test]
fn report_serializes_infoleak_key() {
    let truth = vec![Tensor::zeros(&[2])];
    let rep = AttackReport::new(AttackKind::WhiteBox, &truth, vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()]);
    assert_eq!(rep.mean_distance, 5.0);
    assert_eq!(rep.scaled_mae, 3.5);
    let v = serde_json::to_value(&rep).unwrap();
    assert_eq!(v["infoleak"], 1.0 / 6.0);
    assert_eq!(v["kind"], "white-box");
}

#[test]
fn identity_bound_example() {
    let cert = LipschitzCertificate::new(DMatrix::identity(4, 4));
    assert!((cert.lipschitz - 1.0).abs() < 1e-12);
    let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let noise = DVector::from_vec(vec![0.06, 0.0, -0.08, 0.0]);
    let (dev, bound) = bound_trial(&cert, &x, &noise).unwrap();
    assert!((bound - 0.1).abs() < 1e-12);
    assert!(dev >= 0.1 - 1e-12);
}

#[test]
fn inconsistent_systems_are_skipped() {
    let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let cert = LipschitzCertificate::new(w);
    let x = DVector::from_vec(vec![1.0, 1.0]);
    assert!(bound_trial(&cert, &x, &DVector::from_vec(vec![0.0, 0.0, 0.5])).is_none());
    assert!(bound_trial(&cert, &x, &DVector::from_vec(vec![0.1, 0.0, 0.0])).is_some());
}

#[test]
fn bound_holds_on_random_square_systems() {
    let rep = bound_check(1000, 6, &DpConfig::with_epsilon(Some(4.0)), &mut rng(3)).unwrap();
    assert_eq!(rep.skipped, 0);
    assert_eq!(rep.pass_rate, 1.0, "{rep:?}");
    assert!(rep.worst_ratio >= 1.0 - 1e-9);
    assert!(bound_check(10, 3, &DpConfig::with_epsilon(None), &mut rng(3)).is_err());
}

#[test]
fn kmeans_picks_one_point_per_cluster() {
    let mut r = rng(4);
    let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut points = Vec::new();
    for c in centres {
        for _ in 0..20 {
            let dx: f64 = StandardNormal.sample(&mut r);
            let dy: f64 = StandardNormal.sample(&mut r);
            points.push(vec![c[0] + 0.1 * dx, c[1] + 0.1 * dy]);
        }
    }
    let picked = representative_samples(&points, 3, &mut rng(5));
    let mut clusters: Vec<usize> = picked.iter().map(|i| i / 20).collect();
    clusters.sort_unstable();
    assert_eq!(clusters, vec![0, 1, 2]);
    assert_eq!(picked, representative_samples(&points, 3, &mut rng(5)));
    assert_eq!(representative_samples(&points[..2], 16, &mut rng(5)), vec![0, 1]);
}

fn small_federation(seed: u64) -> (PreparedData, Federation) {
    let (a, p) = generate_synthetic(&SyntheticConfig {
        n_active: 3,
        n_passive: 4,
        steps: 200,
        horizon: 2,
        ..Default::default()
    })
    .unwrap();
    let data = prepare(&a, &[p], SplitRatios::default(), WindowSpec { history: 4, horizon: 2 }).unwrap();
    let setup = FederationSetup {
        model: crate::models::ModelConfig {
            hidden: 8,
            ..Default::default()
        },
        vna: VnaConfig { k: 2, n_head: 2, rank: 4 },
        train: TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut fed = Federation::new(setup, &data, seed).unwrap();
    fed.train(&data).unwrap();
    (data, fed)
}

#[test]
fn whitebox_beats_random_guess_on_passive_model() {
    let (data, mut fed) = small_federation(1);
    let samples = [0, 3, 6, 9];
    let targets = published_targets(&mut fed, &data.test, 0, &samples, TargetLevels::First).unwrap();
    assert_eq!(targets.shape(), &[4, 3, 8]);
    let truth: Vec<Tensor> = samples.iter().map(|&s| data.test.passive_window(0, s)).collect();
    let map = PassiveMap {
        party: &fed.passives[0],
        steps: data.test.passive_history[0],
        targets: TargetLevels::First,
    };
    let recon = whitebox_attack(&map, &targets, &WhiteboxConfig::default(), &mut rng(6)).unwrap();
    let wb = AttackReport::new(AttackKind::WhiteBox, &truth, recon);
    let rg = baseline_attack(AttackKind::RandomGuess, &truth, GuessDistribution::Normal, &mut rng(7)).unwrap();
    assert!(wb.lambda > rg.lambda, "{} vs {}", wb.lambda, rg.lambda);

    // the inverted inputs reproduce the targets better than the zero start
    let fit = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = map.embed(&mut tape, xv).unwrap();
        tape.value(y).max_abs_diff(&targets)
    };
    assert!(fit(&stack(&wb.reconstructed)) < fit(&Tensor::zeros(&[4, 4, 4, 2])));
}

#[test]
fn queryfree_leaves_federation_untouched() {
    let (data, mut fed) = small_federation(2);
    let before = fed.stores();
    let samples = [1, 2];
    let targets = published_targets(&mut fed, &data.test, 0, &samples, TargetLevels::All).unwrap();
    assert_eq!(targets.shape(), &[2, 3, 16]);
    let cfg = QueryFreeConfig {
        surrogate_epochs: 1,
        inversion: WhiteboxConfig {
            steps: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let recon = queryfree_attack(&fed, 0, &[&data.train, &data.valid], &targets, TargetLevels::All, &cfg, &mut rng(8)).unwrap();
    assert_eq!(recon.len(), 2);
    assert_eq!(recon[0].shape(), &[4, 4, 2]);
    assert_eq!(fed.stores(), before);
    let again = queryfree_attack(&fed, 0, &[&data.train, &data.valid], &targets, TargetLevels::All, &cfg, &mut rng(8)).unwrap();
    assert_eq!(recon, again);
}
