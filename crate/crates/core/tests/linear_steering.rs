//! Steering through the public API on linear models, where the answer is
//! known in closed form and can be checked with an independent solver.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsteer_core::evaluation::{evaluation_seeds, monotonicity_rate, score_curves, Trend};
use semsteer_core::models::{LatentVector, LinearGenerator, LinearScorer};
use semsteer_core::shapeworld::AttributeId;
use semsteer_core::steering::{
    linear_oracle_config, oracle_check, target_score, train_direction, transform, SteeringConfig,
};
use semsteer_core::Tensor;

fn pair(d: usize, p: usize, seed: u64) -> (LinearGenerator, LinearScorer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&[d, p], |_| rng.random_range(-1.0..1.0) / (d as f64).sqrt());
    let b = Tensor::from_fn(&[p], |_| rng.random_range(-0.1..0.1));
    let sw: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0) / (p as f64).sqrt()).collect();
    (LinearGenerator::new(w, b).unwrap(), LinearScorer::new(&sw, 0.1))
}

/// Minimum-norm θ with `(Ww)ᵀθ = 1`, by SVD.
fn min_norm_theta(g: &LinearGenerator, s: &LinearScorer) -> Vec<f64> {
    let (d, p) = (g.weight().shape()[0], g.output_dim());
    let w = DMatrix::from_row_slice(d, p, g.weight().data());
    let row = (w * DVector::from_column_slice(s.weight().data())).transpose();
    let pinv = row.pseudo_inverse(1e-12).unwrap();
    (pinv * DVector::from_element(1, 1.0)).iter().copied().collect()
}

#[test]
fn trained_direction_matches_the_pseudoinverse() {
    let (g, s) = pair(8, 24, 5);
    let cfg = linear_oracle_config(&g, &s, 5);
    let trained = train_direction(&g, &s, AttributeId::Evil, &cfg).unwrap();
    let theta = trained.direction.theta.data();
    let oracle = min_norm_theta(&g, &s);
    let dist: f64 = theta.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = oracle.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dist / norm < 1e-3, "relative distance {}", dist / norm);
    let report = oracle_check(&g, &s, theta).unwrap();
    assert!((report.gain - 1.0).abs() < 1e-3 && report.cosine > 0.999, "{report:?}");
    assert!(trained.direction.final_loss < 1e-6);
}

#[test]
fn score_curves_of_the_oracle_are_unit_slope_lines() {
    let (g, s) = pair(6, 10, 9);
    let theta = min_norm_theta(&g, &s);
    let mut dir = semsteer_core::steering::SteeringDirection::from_vector(AttributeId::Radiant, &theta);
    dir.training_range = 0.5;
    let seeds = evaluation_seeds(&g, 12, 3, 2.0).unwrap();
    let alphas = [-0.4, -0.2, 0.0, 0.2, 0.4];
    let curves = score_curves(&g, &s, &dir, &seeds, &alphas).unwrap();
    for c in &curves {
        for (a, v) in alphas.iter().zip(c) {
            assert!((v - c[2] - a).abs() < 1e-9, "score at {a}: {v}, base {}", c[2]);
        }
    }
    assert_eq!(monotonicity_rate(&curves, Trend::Nondecreasing), 1.0);
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let (g, s) = pair(4, 8, 2);
    let cfg = SteeringConfig {
        steps: 40,
        batch_size: 8,
        eval_batch: 16,
        clamp_target: false,
        ..SteeringConfig::default()
    };
    let a = train_direction(&g, &s, AttributeId::Dense, &cfg).unwrap();
    let b = train_direction(&g, &s, AttributeId::Dense, &cfg).unwrap();
    assert_eq!(a.direction, b.direction);
    assert_eq!(a.loss_curve, b.loss_curve);
    let c = train_direction(&g, &s, AttributeId::Dense, &SteeringConfig { seed: cfg.seed + 1, ..cfg }).unwrap();
    assert_ne!(a.loss_curve, c.loss_curve);
}

proptest! {
    #[test]
    fn transform_moves_by_alpha_theta(
        z in proptest::collection::vec(-3.0f64..3.0, 5),
        theta in proptest::collection::vec(-2.0f64..2.0, 5),
        alpha in -1.0f64..1.0,
    ) {
        let moved = transform(&LatentVector(z.clone()), alpha, &theta).unwrap();
        for i in 0..5 {
            prop_assert!((moved.0[i] - z[i] - alpha * theta[i]).abs() < 1e-12);
        }
        let back = transform(&moved, -alpha, &theta).unwrap();
        for i in 0..5 {
            prop_assert!((back.0[i] - z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_targets_stay_in_the_unit_interval(s in 0.0f64..=1.0, alpha in -0.5f64..=0.5) {
        let t = target_score(s, alpha, true);
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert_eq!(target_score(s, alpha, false), s + alpha);
        if (0.0..=1.0).contains(&(s + alpha)) {
            prop_assert_eq!(t, s + alpha);
        }
    }
}
