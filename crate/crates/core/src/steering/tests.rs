use super::*;
use rand::Rng;
use crate::autodiff::grad_check;
use crate::models::{GeneratorConfig, GeneratorParams, ScorerConfig, ScorerParams};
use proptest::prelude::*;

fn small_generator() -> GeneratorParams {
    let config = GeneratorConfig {
        image_size: 8,
        z_dim: 4,
        embed_dim: 3,
        base_channels: 3,
        mid_channels: 2,
        class_count: 4,
    };
    GeneratorParams::init(config, 5).unwrap()
}

fn small_scorer() -> ScorerParams {
    let config = ScorerConfig {
        image_size: 8,
        channels1: 3,
        channels2: 4,
        outputs: 4,
    };
    let mut s = ScorerParams::init(config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for t in s.head_mut() {
        *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0));
    }
    s
}

fn random_linear_pair(d: usize, p: usize, seed: u64) -> (LinearGenerator, LinearScorer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&[d, p], |_| rng.random_range(-1.0..1.0) / libm::sqrt(d as f64));
    let b = Tensor::from_fn(&[p], |_| rng.random_range(-0.1..0.1));
    let sw: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0) / libm::sqrt(p as f64)).collect();
    (LinearGenerator::new(w, b).unwrap(), LinearScorer::new(&sw, 0.2))
}

/// Minimum-norm solution of `(W w)ᵀθ = 1` from an SVD pseudoinverse.
fn pinv_solution(g: &LinearGenerator, s: &LinearScorer) -> Vec<f64> {
    let (d, p) = (g.z_dim(), g.output_dim());
    let w = nalgebra::DMatrix::from_row_slice(d, p, g.weight().data());
    let sw = nalgebra::DVector::from_column_slice(s.weight().data());
    let row = (w * sw).transpose();
    let pinv = row.pseudo_inverse(1e-12).unwrap();
    let theta = pinv * nalgebra::DVector::from_element(1, 1.0);
    theta.iter().copied().collect()
}

fn batch_of(zs: &[Vec<f64>], classes: Vec<usize>, alphas: Vec<f64>) -> SteeringBatch {
    let zs: Vec<LatentVector> = zs.iter().cloned().map(LatentVector).collect();
    SteeringBatch::new(&zs, classes, alphas).unwrap()
}

#[test]
fn transform_adds_scaled_direction() {
    let z = LatentVector(vec![1.0, 2.0]);
    assert_eq!(transform(&z, 0.5, &[2.0, -2.0]).unwrap(), LatentVector(vec![2.0, 1.0]));
    assert_eq!(transform(&z, 0.0, &[9.0, 9.0]).unwrap(), z);
    assert_eq!(
        transform(&z, 1.0, &[1.0]),
        Err(SteeringError::DimensionMismatch { expected: 2, actual: 1 })
    );
}

#[test]
fn target_examples() {
    assert_eq!(target_score(0.9, 0.5, true), 1.0);
    assert_eq!(target_score(0.2, -0.5, true), 0.0);
    assert_eq!(target_score(0.25, 0.25, true), 0.5);
    assert_eq!(target_score(0.1, -0.5, false), 0.1 - 0.5);
    assert_eq!(target_score(0.9, 0.5, false), 0.9 + 0.5);
}

#[test]
fn per_class_direction_selects_rows() {
    let mut d = SteeringDirection::zero(AttributeId::Dense, 3, 2);
    d.theta = Tensor::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
    assert!(d.is_per_class());
    assert_eq!(d.theta_for(ClassLabel(1)), &[0.0, 1.0]);
    assert_eq!(d.theta_for(ClassLabel(2)), &[2.0, 2.0]);
    let z = LatentVector(vec![0.0, 0.0]);
    assert_eq!(d.transform(&z, 0.5, ClassLabel(2)).unwrap(), LatentVector(vec![1.0, 1.0]));
    let shared = SteeringDirection::from_vector(AttributeId::Evil, &[1.0, 2.0]);
    assert!(!shared.is_per_class());
    assert_eq!(shared.theta_for(ClassLabel(3)), &[1.0, 2.0]);
}

#[test]
fn extrapolation_is_beyond_training_range() {
    let d = SteeringDirection::from_vector(AttributeId::Radiant, &[1.0]);
    assert!(!d.is_extrapolated(0.5));
    assert!(!d.is_extrapolated(-0.5));
    assert!(d.is_extrapolated(0.6));
    assert!(d.is_extrapolated(-0.51));
}

#[test]
fn zero_direction_loss_is_mean_alpha_squared() {
    let g = small_generator();
    let s = small_scorer();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = SteeringBatch::sample(&g, 24, 0.5, 2.0, &mut rng).unwrap();
    let loss = steering_loss(&Tensor::zeros(&[1, 4]), &batch, &g, &s, AttributeId::Evil, false).unwrap();
    let expected = batch.alphas.iter().map(|a| a * a).sum::<f64>() / batch.len() as f64;
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
}

#[test]
fn zero_direction_loss_matches_analytic_expectation() {
    let (g, s) = random_linear_pair(16, 64, 1);
    let a = DEFAULT_ALPHA_RANGE;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch = SteeringBatch::sample(&g, 200_000, a, 2.0, &mut rng).unwrap();
    let loss = steering_loss(&Tensor::zeros(&[1, 16]), &batch, &g, &s, AttributeId::Dense, false).unwrap();
    assert!((loss - a * a / 3.0).abs() < 1e-3, "{loss}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let g = small_generator();
    let s = small_scorer();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..5 {
        let batch = SteeringBatch::sample(&g, 6, 0.5, 2.0, &mut rng).unwrap();
        let theta = Tensor::from_fn(&[1, 4], |_| rng.random_range(-0.5..0.5));
        for clamp in [false, true] {
            let report = grad_check(
                |tape: &mut Tape, t: Var| steering_loss_on_tape(tape, t, &batch, &g, &s, AttributeId::Minimal, clamp),
                &theta,
                1e-6,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "trial {trial}: {}", report.max_relative_error);
        }
    }
}

#[test]
fn per_class_gradient_matches_finite_differences() {
    let g = small_generator();
    let s = small_scorer();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let batch = SteeringBatch::sample(&g, 8, 0.5, 2.0, &mut rng).unwrap();
    let theta = Tensor::from_fn(&[4, 4], |_| rng.random_range(-0.5..0.5));
    let report = grad_check(
        |tape: &mut Tape, t: Var| steering_loss_on_tape(tape, t, &batch, &g, &s, AttributeId::Radiant, true),
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{}", report.max_relative_error);
}

#[test]
fn linear_gradient_is_closed_form() {
    let (g, s) = random_linear_pair(5, 9, 4);
    let v = linear_score_gradient(&g, &s);
    // Independent route: score of each basis latent minus the score at zero.
    let score = |z: &[f64]| {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::row(z));
        let img = g.generate(&mut tape, zv, &[0]).unwrap();
        let out = s.attribute_score(&mut tape, img, AttributeId::Dense).unwrap();
        tape.value(out).item()
    };
    let base = score(&[0.0; 5]);
    for i in 0..5 {
        let mut e = [0.0; 5];
        e[i] = 1.0;
        assert!((score(&e) - base - v[i]).abs() < 1e-12);
    }
}

#[test]
fn linear_pairs_recover_the_pseudoinverse_direction() {
    for k in 0..10 {
        let (g, s) = random_linear_pair(16, 64, 100 + k);
        let config = linear_oracle_config(&g, &s, k);
        let trained = train_direction(&g, &s, AttributeId::Dense, &config).unwrap();
        let theta = trained.direction.theta.data();
        let report = oracle_check(&g, &s, theta).unwrap();
        assert!(trained.direction.final_loss < 1e-6, "pair {k}: loss {}", trained.direction.final_loss);
        assert!((report.gain - 1.0).abs() <= 1e-3, "pair {k}: gain {}", report.gain);
        assert!(report.cosine > 0.999, "pair {k}: cosine {}", report.cosine);
        let oracle = pinv_solution(&g, &s);
        let dist = libm::sqrt(theta.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        let norm = libm::sqrt(oracle.iter().map(|a| a * a).sum::<f64>());
        assert!(dist <= 1e-3 * norm, "pair {k}: {dist} from oracle of norm {norm}");
        assert!((report.distance_to_min_norm - dist).abs() < 1e-9);
    }
}

#[test]
fn scalar_and_identity_oracle_cases() {
    let g = LinearGenerator::new(Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap(), Tensor::zeros(&[1])).unwrap();
    let s = LinearScorer::new(&[3.0], 0.0);
    let trained = train_direction(&g, &s, AttributeId::Evil, &linear_oracle_config(&g, &s, 0)).unwrap();
    assert!((trained.direction.theta.data()[0] - 1.0 / 6.0).abs() < 1e-6);

    let w = [0.5, -1.0, 2.0, 0.0];
    let g = LinearGenerator::new(Tensor::identity(4), Tensor::zeros(&[4])).unwrap();
    let s = LinearScorer::new(&w, 0.0);
    let trained = train_direction(&g, &s, AttributeId::Evil, &linear_oracle_config(&g, &s, 1)).unwrap();
    let ww: f64 = w.iter().map(|a| a * a).sum();
    for (t, wi) in trained.direction.theta.data().iter().zip(w) {
        assert!((t - wi / ww).abs() < 1e-6);
    }
}

#[test]
fn training_is_deterministic() {
    let g = small_generator();
    let s = small_scorer();
    let config = SteeringConfig {
        steps: 15,
        batch_size: 8,
        eval_batch: 16,
        ..SteeringConfig::default()
    };
    let a = train_direction(&g, &s, AttributeId::Dense, &config).unwrap();
    let b = train_direction(&g, &s, AttributeId::Dense, &config).unwrap();
    assert!(a.direction.theta.bit_eq(&b.direction.theta));
    assert_eq!(a.loss_curve.len(), 15);
    assert_eq!(
        a.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.direction.generator_digest, g.digest());
    assert_eq!(a.direction.scorer_digest, s.digest());
}

#[test]
fn per_class_training_has_a_row_per_class() {
    let g = small_generator();
    let s = small_scorer();
    let config = SteeringConfig {
        steps: 3,
        batch_size: 8,
        eval_batch: 8,
        per_class: true,
        ..SteeringConfig::default()
    };
    let t = train_direction(&g, &s, AttributeId::Minimal, &config).unwrap();
    assert_eq!(t.direction.theta.shape(), &[4, 4]);
}

#[test]
fn zero_steps_leave_theta_at_zero() {
    let g = small_generator();
    let s = small_scorer();
    let config = SteeringConfig {
        steps: 0,
        eval_batch: 32,
        ..SteeringConfig::default()
    };
    let t = train_direction(&g, &s, AttributeId::Radiant, &config).unwrap();
    assert!(t.loss_curve.is_empty());
    assert_eq!(t.direction.theta.max_abs(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let eval = SteeringBatch::sample(&g, 32, config.alpha_range, config.truncation, &mut rng).unwrap();
    let baseline = steering_loss(&Tensor::zeros(&[1, 4]), &eval, &g, &s, AttributeId::Radiant, true).unwrap();
    assert_eq!(t.direction.final_loss, baseline);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let (g, s) = random_linear_pair(4, 8, 2);
    let config = SteeringConfig {
        learning_rate: 1e300,
        optimizer: OptimizerKind::Sgd,
        clamp_target: false,
        ..linear_oracle_config(&g, &s, 0)
    };
    match train_direction(&g, &s, AttributeId::Dense, &config) {
        Err(SteeringError::Diverged { last_theta, .. }) => assert!(last_theta.is_finite()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let g = small_generator();
    let s = small_scorer();
    let base = SteeringConfig::default();
    for bad in [
        SteeringConfig { alpha_range: 0.0, ..base },
        SteeringConfig { batch_size: 0, ..base },
        SteeringConfig { eval_batch: 0, ..base },
        SteeringConfig { learning_rate: -1.0, ..base },
        SteeringConfig { truncation: 0.0, ..base },
    ] {
        assert!(matches!(
            train_direction(&g, &s, AttributeId::Dense, &bad),
            Err(SteeringError::InvalidConfig(_))
        ));
    }
}

#[test]
fn batches_validate_their_inputs() {
    assert_eq!(SteeringBatch::new(&[], vec![], vec![]), Err(SteeringError::EmptyBatch));
    let z = [LatentVector(vec![0.0; 4])];
    assert!(SteeringBatch::new(&z, vec![0, 1], vec![0.1]).is_err());
    let g = small_generator();
    let s = small_scorer();
    let batch = batch_of(&[vec![0.0; 4]], vec![0], vec![0.2]);
    assert!(matches!(
        steering_loss(&Tensor::zeros(&[1, 3]), &batch, &g, &s, AttributeId::Dense, true),
        Err(SteeringError::DimensionMismatch { expected: 4, actual: 3 })
    ));
}

#[test]
fn sampled_alphas_stay_in_range() {
    let g = small_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = SteeringBatch::sample(&g, 500, 0.3, 2.0, &mut rng).unwrap();
    assert!(batch.alphas.iter().all(|a| (-0.3..0.3).contains(a)));
    assert!(batch.classes.iter().all(|&c| c < 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clamped_loss_never_exceeds_unclamped(
        seed in any::<u64>(),
        theta in proptest::collection::vec(-3.0..3.0f64, 4),
        range in 0.1..1.5f64,
    ) {
        let g = small_generator();
        let s = small_scorer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = SteeringBatch::sample(&g, 6, range, 2.0, &mut rng).unwrap();
        let theta = Tensor::row(&theta);
        let clamped = steering_loss(&theta, &batch, &g, &s, AttributeId::Evil, true).unwrap();
        let plain = steering_loss(&theta, &batch, &g, &s, AttributeId::Evil, false).unwrap();
        prop_assert!(clamped <= plain + 1e-15);
    }

    #[test]
    fn transform_is_affine_in_alpha(
        z in proptest::collection::vec(-3.0..3.0f64, 5),
        theta in proptest::collection::vec(-3.0..3.0f64, 5),
        a in -1.0..1.0f64,
        b in -1.0..1.0f64,
    ) {
        let z = LatentVector(z);
        let ta = transform(&z, a, &theta).unwrap();
        let tb = transform(&z, b, &theta).unwrap();
        for i in 0..5 {
            prop_assert!(((ta.0[i] - tb.0[i]) - (a - b) * theta[i]).abs() < 1e-12);
        }
        let back = transform(&ta, -a, &theta).unwrap();
        for i in 0..5 {
            prop_assert!((back.0[i] - z.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_targets_lie_in_unit_interval(s in 0.0..=1.0f64, a in -2.0..2.0f64) {
        let t = target_score(s, a, true);
        prop_assert!((0.0..=1.0).contains(&t));
        if (0.0..=1.0).contains(&(s + a)) {
            prop_assert_eq!(t, s + a);
        }
    }
}
