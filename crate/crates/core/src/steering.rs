//! Learned latent directions: `T(z, α) = z + αθ`, trained so that the
//! scorer's attribute score moves by `α`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Optimizer, OptimizerConfig, OptimizerKind, Tape, Var};
use crate::models::{ClassLabel, Generator, LatentVector, LinearGenerator, LinearScorer, ModelError, Scorer};
use crate::shapeworld::AttributeId;
use crate::tensor::{ContentDigest, Tensor};

/// Default half-width of the training α range.
pub const DEFAULT_ALPHA_RANGE: f64 = 0.5;

/// Where in the steering computation a non-finite value appeared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generator,
    Scorer,
    Loss,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generator => "generator",
            Stage::Scorer => "scorer",
            Stage::Loss => "loss",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SteeringError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite value in the {stage} stage")]
    NonFinite { stage: Stage },
    #[error("direction has dimension {actual}, latent has {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid steering configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("steering batch is empty")]
    EmptyBatch,
    #[error("alpha {alpha} outside the training range ±{range}")]
    AlphaOutOfRange { alpha: f64, range: f64 },
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_theta: Tensor },
}

impl From<AutodiffError> for SteeringError {
    fn from(e: AutodiffError) -> Self {
        SteeringError::Model(e.into())
    }
}

/// Settings for [`train_direction`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SteeringConfig {
    /// α is drawn from `U(-alpha_range, alpha_range)`.
    pub alpha_range: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clamp_target: bool,
    /// One θ per generator class instead of one shared θ.
    pub per_class: bool,
    /// Latent truncation, in standard deviations.
    pub truncation: f64,
    /// Size of the fixed batch the reported final loss is measured on.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha_range: DEFAULT_ALPHA_RANGE,
            batch_size: 32,
            steps: 600,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            clamp_target: true,
            per_class: false,
            truncation: 2.0,
            eval_batch: 256,
            seed: 31,
        }
    }
}

impl SteeringConfig {
    /// `steps = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<(), SteeringError> {
        if !(self.alpha_range > 0.0 && self.alpha_range.is_finite()) {
            return Err(SteeringError::InvalidConfig("alpha range must be positive and finite"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(SteeringError::InvalidConfig("batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SteeringError::InvalidConfig("learning rate must be positive"));
        }
        if !(self.truncation > 0.0) {
            return Err(SteeringError::InvalidConfig("truncation must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.learning_rate),
            OptimizerKind::Adam => OptimizerConfig::adam(self.learning_rate),
        }
    }
}

/// A trained direction `θ` for one attribute. `theta` has one row, or one
/// row per generator class when trained per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDirection {
    pub attribute: AttributeId,
    pub theta: Tensor,
    pub training_range: f64,
    pub final_loss: f64,
    pub generator_digest: ContentDigest,
    pub scorer_digest: ContentDigest,
}

impl SteeringDirection {
    /// A direction with every component zero.
    pub fn zero(attribute: AttributeId, rows: usize, dim: usize) -> Self {
        Self {
            attribute,
            theta: Tensor::zeros(&[rows, dim]),
            training_range: DEFAULT_ALPHA_RANGE,
            final_loss: 0.0,
            generator_digest: ContentDigest::of_bytes(&[]),
            scorer_digest: ContentDigest::of_bytes(&[]),
        }
    }

    /// A shared direction from a plain vector.
    pub fn from_vector(attribute: AttributeId, theta: &[f64]) -> Self {
        let mut d = Self::zero(attribute, 1, theta.len());
        d.theta = Tensor::row(theta);
        d
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn is_per_class(&self) -> bool {
        self.theta.shape()[0] > 1
    }

    /// The θ row used for `class`.
    pub fn theta_for(&self, class: ClassLabel) -> &[f64] {
        let rows = self.theta.shape()[0];
        let r = if rows == 1 { 0 } else { class.0.min(rows - 1) };
        let d = self.dim();
        &self.theta.data()[r * d..(r + 1) * d]
    }

    pub fn is_extrapolated(&self, alpha: f64) -> bool {
        libm::fabs(alpha) > self.training_range
    }

    pub fn transform(&self, z: &LatentVector, alpha: f64, class: ClassLabel) -> Result<LatentVector, SteeringError> {
        transform(z, alpha, self.theta_for(class))
    }
}

/// `z + α·θ`.
pub fn transform(z: &LatentVector, alpha: f64, theta: &[f64]) -> Result<LatentVector, SteeringError> {
    if z.dim() != theta.len() {
        return Err(SteeringError::DimensionMismatch {
            expected: z.dim(),
            actual: theta.len(),
        });
    }
    Ok(LatentVector(z.0.iter().zip(theta).map(|(v, t)| v + alpha * t).collect()))
}

/// `s + α`, clamped to `[0, 1]` when `clamp` is set.
pub fn target_score(s: f64, alpha: f64, clamp: bool) -> f64 {
    if clamp {
        (s + alpha).clamp(0.0, 1.0)
    } else {
        s + alpha
    }
}

/// Latents, class labels and α values for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringBatch {
    /// `[N, d]`.
    pub z: Tensor,
    pub classes: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl SteeringBatch {
    pub fn new(zs: &[LatentVector], classes: Vec<usize>, alphas: Vec<f64>) -> Result<Self, SteeringError> {
        if zs.is_empty() {
            return Err(SteeringError::EmptyBatch);
        }
        if classes.len() != zs.len() || alphas.len() != zs.len() {
            return Err(SteeringError::InvalidConfig("batch fields must have equal length"));
        }
        Ok(Self {
            z: LatentVector::batch(zs),
            classes,
            alphas,
        })
    }

    /// Draws `n` latents from the generator's latent distribution, classes
    /// uniformly and α from `U(-range, range)`.
    pub fn sample<G: Generator + ?Sized>(
        g: &G,
        n: usize,
        range: f64,
        truncation: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, SteeringError> {
        let zs = g.latent().sample_with(rng, n, truncation)?;
        let k = g.class_count();
        let classes = (0..n).map(|_| rng.random_range(0..k)).collect();
        let alphas = (0..n).map(|_| rng.random_range(-range..range)).collect();
        Self::new(&zs, classes, alphas)
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

fn staged<T>(r: Result<T, ModelError>, stage: Stage) -> Result<T, SteeringError> {
    match r {
        Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => Err(SteeringError::NonFinite { stage }),
        other => Ok(other?),
    }
}

/// Attribute scores `S(G(z, y))` of the untransformed batch.
pub fn baseline_scores<G: Generator + ?Sized, S: Scorer + ?Sized>(
    g: &G,
    s: &S,
    attribute: AttributeId,
    batch: &SteeringBatch,
) -> Result<Vec<f64>, SteeringError> {
    let mut tape = Tape::new();
    let z = tape.constant(batch.z.clone());
    let img = staged(g.generate(&mut tape, z, &batch.classes), Stage::Generator)?;
    let score = staged(s.attribute_score(&mut tape, img, attribute), Stage::Scorer)?;
    Ok(tape.value(score).data().to_vec())
}

/// Records the steering loss on `tape` for the parameter or constant `theta`
/// (`[rows, d]`). The baseline term enters as a constant.
#[allow(clippy::too_many_arguments)]
pub fn steering_loss_on_tape<G: Generator + ?Sized, S: Scorer + ?Sized>(
    tape: &mut Tape,
    theta: Var,
    batch: &SteeringBatch,
    g: &G,
    s: &S,
    attribute: AttributeId,
    clamp: bool,
) -> Result<Var, SteeringError> {
    if batch.is_empty() {
        return Err(SteeringError::EmptyBatch);
    }
    let ts = tape.value(theta).shape().to_vec();
    let d = batch.z.shape()[1];
    if ts.len() != 2 || ts[1] != d {
        return Err(SteeringError::DimensionMismatch {
            expected: d,
            actual: ts.get(1).copied().unwrap_or(0),
        });
    }
    let rows = ts[0];
    let n = batch.len();
    let baseline = baseline_scores(g, s, attribute, batch)?;
    let targets: Vec<f64> = baseline
        .iter()
        .zip(&batch.alphas)
        .map(|(b, a)| target_score(*b, *a, clamp))
        .collect();

    let mut select = vec![0.0; n * rows];
    for (i, (a, y)) in batch.alphas.iter().zip(&batch.classes).enumerate() {
        let r = if rows == 1 { 0 } else { *y };
        if r >= rows {
            return Err(SteeringError::InvalidConfig("per-class direction has too few rows"));
        }
        select[i * rows + r] = *a;
    }
    let select = tape.constant(Tensor::from_vec(vec![n, rows], select).expect("select shape"));
    let shift = tape.matmul(select, theta)?;
    let z = tape.constant(batch.z.clone());
    let moved = tape.add(z, shift)?;
    let img = staged(g.generate(tape, moved, &batch.classes), Stage::Generator)?;
    let score = staged(s.attribute_score(tape, img, attribute), Stage::Scorer)?;
    let target = tape.constant(Tensor::column(&targets));
    staged(tape.mse(score, target).map_err(ModelError::from), Stage::Loss)
}

/// Steering loss value at `theta`.
pub fn steering_loss<G: Generator + ?Sized, S: Scorer + ?Sized>(
    theta: &Tensor,
    batch: &SteeringBatch,
    g: &G,
    s: &S,
    attribute: AttributeId,
    clamp: bool,
) -> Result<f64, SteeringError> {
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let loss = steering_loss_on_tape(&mut tape, t, batch, g, s, attribute, clamp)?;
    Ok(tape.value(loss).item())
}

/// Steering loss and its gradient with respect to `theta`.
pub fn steering_loss_and_grad<G: Generator + ?Sized, S: Scorer + ?Sized>(
    theta: &Tensor,
    batch: &SteeringBatch,
    g: &G,
    s: &S,
    attribute: AttributeId,
    clamp: bool,
) -> Result<(f64, Tensor), SteeringError> {
    let mut tape = Tape::new();
    let t = tape.parameter(theta.clone());
    let loss = steering_loss_on_tape(&mut tape, t, batch, g, s, attribute, clamp)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.of(t).clone()))
}

/// A trained direction and the per-step minibatch losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDirection {
    pub direction: SteeringDirection,
    pub loss_curve: Vec<f64>,
}

/// Learns θ for `attribute` from a zero start.
pub fn train_direction<G: Generator + ?Sized, S: Scorer + ?Sized>(
    g: &G,
    s: &S,
    attribute: AttributeId,
    config: &SteeringConfig,
) -> Result<TrainedDirection, SteeringError> {
    config.validate()?;
    let rows = if config.per_class { g.class_count() } else { 1 };
    let mut theta = Tensor::zeros(&[rows, g.z_dim()]);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(1);
    let eval = SteeringBatch::sample(g, config.eval_batch, config.alpha_range, config.truncation, &mut eval_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer())?;
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = SteeringBatch::sample(g, config.batch_size, config.alpha_range, config.truncation, &mut rng)?;
        let (loss, grad) = match steering_loss_and_grad(&theta, &batch, g, s, attribute, config.clamp_target) {
            Ok(v) => v,
            Err(SteeringError::NonFinite { .. }) => return Err(SteeringError::Diverged { step, last_theta: theta }),
            Err(e) => return Err(e),
        };
        let before = theta.clone();
        match opt.step(&mut [&mut theta], &[&grad]) {
            Ok(()) if theta.is_finite() => {}
            Ok(()) | Err(AutodiffError::NonFiniteGradient { .. }) => {
                return Err(SteeringError::Diverged {
                    step,
                    last_theta: before,
                })
            }
            Err(e) => return Err(e.into()),
        }
        loss_curve.push(loss);
    }
    let final_loss = steering_loss(&theta, &eval, g, s, attribute, config.clamp_target)?;
    Ok(TrainedDirection {
        direction: SteeringDirection {
            attribute,
            theta,
            training_range: config.alpha_range,
            final_loss,
            generator_digest: g.digest(),
            scorer_digest: s.digest(),
        },
        loss_curve,
    })
}

/// Residuals of a direction trained on a linear generator and scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// `wᵀWθ`; the loss is zero exactly when this is 1.
    pub gain: f64,
    /// Cosine between θ and `Wᵀw`.
    pub cosine: f64,
    /// `‖θ - θ*‖` for the minimum-norm solution `θ* = Wᵀw / ‖Wᵀw‖²`.
    pub distance_to_min_norm: f64,
}

impl OracleReport {
    pub fn passes(&self, gain_tol: f64, min_cosine: f64) -> bool {
        libm::fabs(self.gain - 1.0) <= gain_tol && self.cosine > min_cosine
    }
}

/// `v = Wᵀw`, the latent-space gradient of the composite linear score.
pub fn linear_score_gradient(g: &LinearGenerator, s: &LinearScorer) -> Vec<f64> {
    let (d, p) = (g.z_dim(), g.output_dim());
    let (w, sw) = (g.weight().data(), s.weight().data());
    (0..d)
        .map(|i| (0..p).map(|j| w[i * p + j] * sw[j]).sum())
        .collect()
}

pub fn oracle_check(g: &LinearGenerator, s: &LinearScorer, theta: &[f64]) -> Result<OracleReport, SteeringError> {
    let v = linear_score_gradient(g, s);
    if v.len() != theta.len() {
        return Err(SteeringError::DimensionMismatch {
            expected: v.len(),
            actual: theta.len(),
        });
    }
    let dot: f64 = v.iter().zip(theta).map(|(a, b)| a * b).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let tt: f64 = theta.iter().map(|a| a * a).sum();
    let cosine = if vv > 0.0 && tt > 0.0 { dot / libm::sqrt(vv * tt) } else { 0.0 };
    let dist = v
        .iter()
        .zip(theta)
        .map(|(a, b)| {
            let e = b - a / vv;
            e * e
        })
        .sum::<f64>();
    Ok(OracleReport {
        gain: dot,
        cosine,
        distance_to_min_norm: libm::sqrt(dist),
    })
}

/// SGD settings for the linear pair: plain gradient descent with the
/// learning rate that would solve the expected loss in one step.
pub fn linear_oracle_config(g: &LinearGenerator, s: &LinearScorer, seed: u64) -> SteeringConfig {
    let v = linear_score_gradient(g, s);
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let a = DEFAULT_ALPHA_RANGE;
    let second_moment = a * a / 3.0;
    SteeringConfig {
        alpha_range: a,
        batch_size: 64,
        steps: 200,
        learning_rate: 0.5 / (second_moment * vv.max(1e-12)),
        optimizer: OptimizerKind::Sgd,
        clamp_target: false,
        per_class: false,
        truncation: 2.0,
        eval_batch: 256,
        seed,
    }
}

#[cfg(test)]
mod tests;
