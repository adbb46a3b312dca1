use super::*;
use crate::models::{GeneratorConfig, GeneratorParams, LinearGenerator, LinearScorer};
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

fn linear_pair() -> (LinearGenerator, LinearScorer) {
    let w = Tensor::from_fn(&[3, 6], |i| ((i * 7) % 5) as f64 / 5.0 - 0.4);
    let g = LinearGenerator::new(w, Tensor::zeros(&[6])).unwrap();
    let s = LinearScorer::new(&[0.3, -0.1, 0.2, 0.0, 0.5, -0.2], 0.5);
    (g, s)
}

/// Pearson correlation, used on ranks as an independent Spearman oracle.
fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    cov / libm::sqrt(vx * vy)
}

#[test]
fn grid_validation() {
    assert!(AlphaGrid::new(vec![-0.2, 0.0, 0.2]).is_ok());
    assert_eq!(AlphaGrid::new(vec![0.0, 0.0, 0.2]), Err(GridError::NotIncreasing));
    assert_eq!(AlphaGrid::new(vec![0.2, 0.0]), Err(GridError::NotIncreasing));
    assert_eq!(AlphaGrid::new(vec![0.0, f64::NAN]), Err(GridError::NotIncreasing));
    assert_eq!(AlphaGrid::new(vec![-0.1, 0.1]), Err(GridError::MissingZero));
}

#[test]
fn default_and_symmetric_grids() {
    let d = AlphaGrid::default();
    assert_eq!(d.values(), &[-0.4, -0.2, 0.0, 0.2, 0.4]);
    assert_eq!(d.zero_index(), 2);
    let s = AlphaGrid::symmetric(0.4, 2).unwrap();
    assert_eq!(s, d);
    let wide = AlphaGrid::symmetric(1.0, 4).unwrap();
    assert_eq!(wide.len(), 9);
    assert_eq!(wide.zero_index(), 4);
}

#[test]
fn monotonicity_examples() {
    assert!(is_monotone(&[0.1, 0.2, 0.3], Trend::Nondecreasing, 0.0));
    assert!(!is_monotone(&[0.1, 0.09, 0.3], Trend::Nondecreasing, 0.0));
    assert!(is_monotone(&[0.1, 0.095, 0.3], Trend::Nondecreasing, MONOTONE_SLACK));
    assert!(!is_monotone(&[0.1, 0.05, 0.3], Trend::Nondecreasing, MONOTONE_SLACK));
    assert!(is_monotone(&[0.3, 0.2, 0.2], Trend::Nonincreasing, 0.0));
    assert!(is_monotone(&[0.5], Trend::Nondecreasing, 0.0));
    let curves = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.2, 0.2], vec![0.0, 0.5]];
    assert_eq!(monotonicity_rate(&curves, Trend::Nondecreasing), 0.75);
    assert_eq!(monotonicity_rate(&curves, Trend::Nonincreasing), 0.5);
    assert_eq!(monotonicity_rate(&[], Trend::Nondecreasing), 0.0);
}

#[test]
fn spearman_examples() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&xs, &[10.0, 20.0, 30.0, 40.0]), 1.0);
    assert_eq!(spearman(&xs, &[4.0, 3.0, 2.0, 1.0]), -1.0);
    assert_eq!(spearman(&xs, &[1.0, 8.0, 27.0, 1000.0]), 1.0);
    assert_eq!(spearman(&xs, &[5.0, 5.0, 5.0, 5.0]), 0.0);
    // Ranks 1, 2.5, 2.5, 4 against 1..4.
    let r = spearman(&xs, &[1.0, 2.0, 2.0, 3.0]);
    assert!((r - pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.5, 2.5, 4.0])).abs() < 1e-12);
}

#[test]
fn linear_curves_have_the_closed_form_slope() {
    let (g, s) = linear_pair();
    let theta = [0.4, -1.0, 0.7];
    let dir = SteeringDirection::from_vector(AttributeId::Dense, &theta);
    let v = crate::steering::linear_score_gradient(&g, &s);
    let slope: f64 = v.iter().zip(&theta).map(|(a, b)| a * b).sum();
    assert!(slope > 0.0);
    let seeds = evaluation_seeds(&g, 12, 3, 2.0).unwrap();
    let grid = AlphaGrid::default();
    let curves = score_curves(&g, &s, &dir, &seeds, grid.values()).unwrap();
    for (seed, curve) in seeds.iter().zip(&curves) {
        let x: Vec<f64> = (0..6)
            .map(|j| (0..3).map(|i| seed.z.0[i] * g.weight().data()[i * 6 + j]).sum())
            .collect();
        let base = s.score_flat(&x);
        for (a, c) in grid.values().iter().zip(curve) {
            assert!((c - (base + a * slope)).abs() < 1e-12);
        }
    }
}

#[test]
fn report_on_linear_pair() {
    let (g, s) = linear_pair();
    let dir = SteeringDirection::from_vector(AttributeId::Dense, &[0.4, -1.0, 0.7]);
    let v = crate::steering::linear_score_gradient(&g, &s);
    let slope: f64 = v[0] * 0.4 - v[1] + v[2] * 0.7;
    let seeds = evaluation_seeds(&g, 20, 1, 2.0).unwrap();
    let grid = AlphaGrid::default();
    let curves = score_curves(&g, &s, &dir, &seeds, grid.values()).unwrap();
    let mono = monotonicity_rate(&curves, Trend::Nondecreasing);
    assert_eq!(mono, 1.0);
    let gap = curves.iter().map(|c| c[4] - c[0]).sum::<f64>() / 20.0;
    assert!((gap - 0.8 * slope).abs() < 1e-12);
    for c in &curves {
        assert!((spearman(grid.values(), c) - 1.0).abs() < 1e-12);
    }
    let flipped = SteeringDirection::from_vector(AttributeId::Dense, &[-0.4, 1.0, -0.7]);
    let curves = score_curves(&g, &s, &flipped, &seeds, grid.values()).unwrap();
    assert_eq!(monotonicity_rate(&curves, Trend::Nondecreasing), 0.0);
    assert_eq!(monotonicity_rate(&curves, Trend::Nonincreasing), 1.0);
}

#[test]
fn report_fields_are_consistent() {
    let g = small_generator();
    let mut s = crate::models::ScorerParams::init(
        crate::models::ScorerConfig {
            image_size: 8,
            channels1: 3,
            channels2: 4,
            outputs: 4,
        },
        2,
    )
    .unwrap();
    let mut k = 0.0;
    for t in s.head_mut() {
        *t = Tensor::from_fn(t.shape(), |i| {
            k += 1.0;
            libm::sin(k + i as f64)
        });
    }
    let dir = SteeringDirection::from_vector(AttributeId::Radiant, &[1.0, -0.5, 0.25, 0.0]);
    let seeds = evaluation_seeds(&g, 10, 4, 2.0).unwrap();
    let grid = AlphaGrid::default();
    let r = evaluate_direction(&g, &s, &dir, &seeds, &grid).unwrap();
    assert_eq!(r.seed_count, 10);
    assert_eq!(r.curves.len(), 10);
    assert_eq!(r.grid, grid.values());
    assert_eq!(r.semantic_measure, SemanticMeasure::Brightness);
    assert_eq!(r.semantic_curve.len(), 5);
    assert_eq!(r.monotonicity_rate, monotonicity_rate(&r.curves, Trend::Nondecreasing));
    for j in 0..5 {
        let m = r.curves.iter().map(|c| c[j]).sum::<f64>() / 10.0;
        assert!((r.mean_curve[j] - m).abs() < 1e-12);
    }
    assert!((r.score_gap - (r.mean_curve[4] - r.mean_curve[0])).abs() < 1e-12);
    let shift = r.curves.iter().map(|c| (c[4] - c[0]) / 0.8).sum::<f64>() / 10.0;
    assert!((r.mean_shift_per_alpha - shift).abs() < 1e-12);
    assert_eq!(r.generator_digest, g.digest());
    assert_eq!(r.scorer_digest, s.digest());
    let again = evaluate_direction(&g, &s, &dir, &seeds, &grid).unwrap();
    assert_eq!(r, again);
}

#[test]
fn evaluation_seeds_are_reproducible_and_distinct_from_training() {
    let g = small_generator();
    let a = evaluation_seeds(&g, 16, 9, 2.0).unwrap();
    let b = evaluation_seeds(&g, 16, 9, 2.0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, evaluation_seeds(&g, 16, 10, 2.0).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = crate::steering::SteeringBatch::sample(&g, 16, 0.5, 2.0, &mut rng).unwrap();
    assert_ne!(LatentVector::batch(&a.iter().map(|s| s.z.clone()).collect::<Vec<_>>()), train.z);
    assert!(a.iter().all(|s| s.class.0 < 4 && s.z.dim() == 4));
}

#[test]
fn strip_layout() {
    let g = small_generator();
    let dir = SteeringDirection::from_vector(AttributeId::Minimal, &[1.0, 0.0, -1.0, 0.5]);
    let z = LatentVector(vec![0.3, -0.2, 0.1, 0.0]);
    let alphas = [-0.4, 0.0, 0.4];
    let strip = render_strip(&g, &dir, &z, ClassLabel(1), &alphas).unwrap();
    assert_eq!((strip.width(), strip.height()), (3 * 8 + 2, 8));
    for y in 0..8 {
        assert_eq!(strip.get(8, y), SEPARATOR);
        assert_eq!(strip.get(17, y), SEPARATOR);
    }
    let centre = g.forward(&z, ClassLabel(1)).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(strip.get(9 + x, y), centre.get(x, y));
        }
    }
    let moved = g.forward(&dir.transform(&z, 0.4, ClassLabel(1)).unwrap(), ClassLabel(1)).unwrap();
    assert_eq!(strip.get(18 + 3, 4), moved.get(3, 4));
}

#[test]
fn semantic_shift_averages_over_seeds() {
    let g = small_generator();
    let dir = SteeringDirection::from_vector(AttributeId::Radiant, &[0.5, 0.5, 0.5, 0.5]);
    let seeds = evaluation_seeds(&g, 5, 2, 2.0).unwrap();
    let alphas = [-0.2, 0.0, 0.2];
    let constant = semantic_shift(&g, &dir, |_| 0.25, &seeds, &alphas).unwrap();
    assert_eq!(constant, vec![0.25; 3]);
    let measured = semantic_shift(&g, &dir, measure_brightness, &seeds, &alphas).unwrap();
    let mut expected = 0.0;
    for s in &seeds {
        expected += measure_brightness(&g.forward(&s.z, s.class).unwrap());
    }
    assert!((measured[1] - expected / 5.0).abs() < 1e-12);
}

#[test]
fn measures_follow_attributes() {
    assert_eq!(SemanticMeasure::for_attribute(AttributeId::Radiant), SemanticMeasure::Brightness);
    assert_eq!(SemanticMeasure::for_attribute(AttributeId::Evil), SemanticMeasure::Brightness);
    assert_eq!(SemanticMeasure::for_attribute(AttributeId::Minimal), SemanticMeasure::EdgeDensity);
    assert_eq!(SemanticMeasure::for_attribute(AttributeId::Dense), SemanticMeasure::EdgeDensity);
    assert_eq!(SemanticMeasure::EdgeDensity.name(), "edge_density");
}

#[test]
fn wrong_direction_dimension_is_an_error() {
    let g = small_generator();
    let dir = SteeringDirection::from_vector(AttributeId::Dense, &[1.0, 2.0]);
    let seeds = evaluation_seeds(&g, 2, 0, 2.0).unwrap();
    assert!(matches!(
        steered_images(&g, &dir, &seeds, &[0.0]),
        Err(SteeringError::DimensionMismatch { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spearman_matches_pearson_on_ranks(ys in proptest::collection::vec(-5.0..5.0f64, 3..12)) {
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        let r = spearman(&xs, &ys);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let ry = ranks(&ys);
        let rx: Vec<f64> = (1..=ys.len()).map(|i| i as f64).collect();
        if ry.iter().any(|v| *v != ry[0]) {
            prop_assert!((r - pearson(&rx, &ry)).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(ys in proptest::collection::vec(-5.0..5.0f64, 3..12)) {
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        let cubed: Vec<f64> = ys.iter().map(|y| y * y * y + 2.0 * y).collect();
        prop_assert!((spearman(&xs, &ys) - spearman(&xs, &cubed)).abs() < 1e-12);
    }

    #[test]
    fn increasing_curves_are_monotone(mut c in proptest::collection::vec(0.0..1.0f64, 2..9)) {
        c.sort_by(f64::total_cmp);
        prop_assert!(is_monotone(&c, Trend::Nondecreasing, 0.0));
        c.reverse();
        prop_assert!(is_monotone(&c, Trend::Nonincreasing, 0.0));
    }

    #[test]
    fn strips_have_separator_layout(count in 1usize..6) {
        let panels: Vec<GrayImage> = (0..count).map(|i| GrayImage::new(4, 3, i as f64 / 10.0)).collect();
        let strip = concat_panels(&panels);
        prop_assert_eq!(strip.width(), count * 5 - 1);
        for i in 1..count {
            prop_assert_eq!(strip.get(i * 5 - 1, 1), SEPARATOR);
        }
    }
}
