//! Score-versus-α curves, monotonicity, ground-truth semantic shift and
//! strip rendering for trained directions.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::image::GrayImage;
use crate::models::{ClassLabel, Generator, LatentVector, Scorer};
use crate::shapeworld::{measure_brightness, measure_edge_density, AttributeId};
use crate::steering::{SteeringDirection, SteeringError};
use crate::tensor::{ContentDigest, Tensor};

/// Slack allowed between consecutive curve points when judging monotonicity.
pub const MONOTONE_SLACK: f64 = 0.01;
/// Default number of held-out evaluation seeds.
pub const DEFAULT_SEEDS: usize = 200;
/// Pixel value of the separator columns in a strip.
pub const SEPARATOR: f64 = 0.5;

/// Strictly increasing α values that include 0.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaGrid(Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("alpha grid must be finite and strictly increasing")]
    NotIncreasing,
    #[error("alpha grid must contain 0")]
    MissingZero,
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, GridError> {
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(GridError::NotIncreasing);
        }
        if !values.contains(&0.0) {
            return Err(GridError::MissingZero);
        }
        Ok(Self(values))
    }

    /// `-max, …, 0, …, max` in `2·steps + 1` equal increments.
    pub fn symmetric(max: f64, steps: usize) -> Result<Self, GridError> {
        let n = steps as i64;
        Self::new((-n..=n).map(|i| max * i as f64 / steps.max(1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.0.iter().position(|v| *v == 0.0).expect("grid contains 0")
    }
}

impl Default for AlphaGrid {
    /// `-0.4, -0.2, 0, 0.2, 0.4`.
    fn default() -> Self {
        Self(vec![-0.4, -0.2, 0.0, 0.2, 0.4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Nondecreasing,
    Nonincreasing,
}

/// Whether `curve` follows `trend`, allowing each step to go the wrong way
/// by at most `slack`.
pub fn is_monotone(curve: &[f64], trend: Trend, slack: f64) -> bool {
    curve.windows(2).all(|w| match trend {
        Trend::Nondecreasing => w[1] >= w[0] - slack,
        Trend::Nonincreasing => w[1] <= w[0] + slack,
    })
}

/// Fraction of curves that follow `trend` within [`MONOTONE_SLACK`].
pub fn monotonicity_rate(curves: &[Vec<f64>], trend: Trend) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    let ok = curves.iter().filter(|c| is_monotone(c, trend, MONOTONE_SLACK)).count();
    ok as f64 / curves.len() as f64
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with averaged ranks for ties; `0` when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let (rx, ry) = (ranks(&xs[..n]), ranks(&ys[..n]));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / libm::sqrt(sxx * syy)
    }
}

/// A latent and class used as an evaluation starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSeed {
    pub z: LatentVector,
    pub class: ClassLabel,
}

/// Evaluation starting points drawn on an RNG stream that direction
/// training never uses.
pub fn evaluation_seeds<G: Generator + ?Sized>(
    g: &G,
    count: usize,
    seed: u64,
    truncation: f64,
) -> Result<Vec<EvalSeed>, SteeringError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe7a1);
    let zs = g.latent().sample_with(&mut rng, count, truncation)?;
    let k = g.class_count();
    Ok(zs
        .into_iter()
        .map(|z| EvalSeed {
            z,
            class: ClassLabel(rng.random_range(0..k)),
        })
        .collect())
}

fn moved_batch(dir: &SteeringDirection, seeds: &[EvalSeed], alphas: &[f64]) -> Result<(Tensor, Vec<usize>), SteeringError> {
    let mut zs = Vec::with_capacity(seeds.len() * alphas.len());
    let mut classes = Vec::with_capacity(zs.capacity());
    for s in seeds {
        for &a in alphas {
            zs.push(dir.transform(&s.z, a, s.class)?);
            classes.push(s.class.0);
        }
    }
    Ok((LatentVector::batch(&zs), classes))
}

/// Images `G(z + αθ, y)` for every seed and α, seed-major.
pub fn steered_images<G: Generator + ?Sized>(
    g: &G,
    dir: &SteeringDirection,
    seeds: &[EvalSeed],
    alphas: &[f64],
) -> Result<Vec<GrayImage>, SteeringError> {
    let mut out = Vec::with_capacity(seeds.len() * alphas.len());
    for chunk in seeds.chunks(32) {
        let (z, classes) = moved_batch(dir, chunk, alphas)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let img = g.generate(&mut tape, zv, &classes)?;
        out.extend(GrayImage::unbatch(tape.value(img)));
    }
    Ok(out)
}

/// Attribute score of `G(z + αθ, y)` at each α, one curve per seed.
pub fn score_curves<G: Generator + ?Sized, S: Scorer + ?Sized>(
    g: &G,
    s: &S,
    dir: &SteeringDirection,
    seeds: &[EvalSeed],
    alphas: &[f64],
) -> Result<Vec<Vec<f64>>, SteeringError> {
    let mut curves = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(32) {
        let (z, classes) = moved_batch(dir, chunk, alphas)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let img = g.generate(&mut tape, zv, &classes)?;
        let score = s.attribute_score(&mut tape, img, dir.attribute)?;
        curves.extend(tape.value(score).data().chunks(alphas.len()).map(|c| c.to_vec()));
    }
    Ok(curves)
}

pub fn score_curve<G: Generator + ?Sized, S: Scorer + ?Sized>(
    g: &G,
    s: &S,
    dir: &SteeringDirection,
    z: &LatentVector,
    class: ClassLabel,
    alphas: &[f64],
) -> Result<Vec<f64>, SteeringError> {
    let seed = EvalSeed { z: z.clone(), class };
    Ok(score_curves(g, s, dir, core::slice::from_ref(&seed), alphas)?.remove(0))
}

/// Ground-truth image measure associated with an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SemanticMeasure {
    Brightness,
    EdgeDensity,
}

impl SemanticMeasure {
    pub fn for_attribute(a: AttributeId) -> Self {
        match a {
            AttributeId::Radiant | AttributeId::Evil => SemanticMeasure::Brightness,
            AttributeId::Minimal | AttributeId::Dense => SemanticMeasure::EdgeDensity,
        }
    }

    pub fn apply(self, image: &GrayImage) -> f64 {
        match self {
            SemanticMeasure::Brightness => measure_brightness(image),
            SemanticMeasure::EdgeDensity => measure_edge_density(image),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticMeasure::Brightness => "brightness",
            SemanticMeasure::EdgeDensity => "edge_density",
        }
    }
}

/// Mean of `measure` over seeds at each α. Takes no scorer.
pub fn semantic_shift<G: Generator + ?Sized>(
    g: &G,
    dir: &SteeringDirection,
    measure: impl Fn(&GrayImage) -> f64,
    seeds: &[EvalSeed],
    alphas: &[f64],
) -> Result<Vec<f64>, SteeringError> {
    let images = steered_images(g, dir, seeds, alphas)?;
    let mut sums = vec![0.0; alphas.len()];
    for row in images.chunks(alphas.len()) {
        for (s, img) in sums.iter_mut().zip(row) {
            *s += measure(img);
        }
    }
    let n = seeds.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Panels `G(z + αθ, y)` left to right in `alphas` order, separated by
/// one-pixel columns of value [`SEPARATOR`].
pub fn render_strip<G: Generator + ?Sized>(
    g: &G,
    dir: &SteeringDirection,
    z: &LatentVector,
    class: ClassLabel,
    alphas: &[f64],
) -> Result<GrayImage, SteeringError> {
    let seed = EvalSeed { z: z.clone(), class };
    let panels = steered_images(g, dir, core::slice::from_ref(&seed), alphas)?;
    Ok(concat_panels(&panels))
}

/// Joins equally sized panels horizontally with separator columns.
pub fn concat_panels(panels: &[GrayImage]) -> GrayImage {
    let (w, h) = (panels[0].width(), panels[0].height());
    let total = panels.len() * w + panels.len() - 1;
    let mut strip = GrayImage::new(total, h, SEPARATOR);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + 1);
        for y in 0..h {
            for x in 0..w {
                strip.set(x0 + x, y, p.get(x, y));
            }
        }
    }
    strip
}

/// Evaluation summary of one direction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SteerReport {
    pub attribute: AttributeId,
    pub grid: Vec<f64>,
    /// One score curve per seed.
    pub curves: Vec<Vec<f64>>,
    /// Mean score over seeds at each α.
    pub mean_curve: Vec<f64>,
    pub monotonicity_rate: f64,
    /// Mean over seeds of `(last - first) / (α_last - α_first)`.
    pub mean_shift_per_alpha: f64,
    /// Mean score at the largest α minus mean score at the smallest α.
    pub score_gap: f64,
    pub mean_spearman: f64,
    pub semantic_measure: SemanticMeasure,
    pub semantic_curve: Vec<f64>,
    pub seed_count: usize,
    pub generator_digest: ContentDigest,
    pub scorer_digest: ContentDigest,
}

pub fn evaluate_direction<G: Generator + ?Sized, S: Scorer + ?Sized>(
    g: &G,
    s: &S,
    dir: &SteeringDirection,
    seeds: &[EvalSeed],
    grid: &AlphaGrid,
) -> Result<SteerReport, SteeringError> {
    let alphas = grid.values();
    let curves = score_curves(g, s, dir, seeds, alphas)?;
    let n = curves.len().max(1) as f64;
    let mut mean_curve = vec![0.0; alphas.len()];
    for c in &curves {
        for (m, v) in mean_curve.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in &mut mean_curve {
        *m /= n;
    }
    let span = alphas[alphas.len() - 1] - alphas[0];
    let mean_shift_per_alpha = if span > 0.0 {
        curves.iter().map(|c| (c[c.len() - 1] - c[0]) / span).sum::<f64>() / n
    } else {
        0.0
    };
    let mean_spearman = curves.iter().map(|c| spearman(alphas, c)).sum::<f64>() / n;
    let measure = SemanticMeasure::for_attribute(dir.attribute);
    let semantic_curve = semantic_shift(g, dir, |img| measure.apply(img), seeds, alphas)?;
    Ok(SteerReport {
        attribute: dir.attribute,
        grid: alphas.to_vec(),
        monotonicity_rate: monotonicity_rate(&curves, Trend::Nondecreasing),
        score_gap: mean_curve[mean_curve.len() - 1] - mean_curve[0],
        mean_curve,
        mean_shift_per_alpha,
        mean_spearman,
        semantic_measure: measure,
        semantic_curve,
        seed_count: seeds.len(),
        curves,
        generator_digest: g.digest(),
        scorer_digest: s.digest(),
    })
}

#[cfg(test)]
mod tests;
