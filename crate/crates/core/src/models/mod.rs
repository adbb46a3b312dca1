//! Generator and scorer models, plus linear stand-ins with closed-form
//! behaviour.

mod generator;
mod linear;
mod scorer;
mod training;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::shapeworld::AttributeId;
use crate::tensor::{ContentDigest, Tensor};

pub use generator::{
    train_generator, Autoencoder, EncoderParams, GeneratorConfig, GeneratorParams, GeneratorTraining, GeneratorVars,
    TrainedGenerator,
};
pub use linear::{LinearGenerator, LinearScorer};
pub use scorer::{
    pretrain_scorer_backbone, retrain_scorer_head, ClassifierTraining, ScorerConfig, ScorerParams, ScorerVars,
    TrainedScorer,
};
pub use training::{holdout_split, shuffled_labels};

/// A point in generator latent space.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Stacks latents into a `[N, d]` batch.
    pub fn batch(zs: &[LatentVector]) -> Tensor {
        let d = zs.first().map_or(0, |z| z.dim());
        let data = zs.iter().flat_map(|z| z.0.iter().copied()).collect();
        Tensor::from_vec(alloc::vec![zs.len(), d], data).expect("latent batch shape")
    }
}

/// Index into a generator's class set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassLabel(pub usize);

/// Per-attribute probabilities in [`AttributeId`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreVector(pub [f64; 4]);

impl ScoreVector {
    pub fn get(&self, attribute: AttributeId) -> f64 {
        self.0[attribute.index()]
    }

    pub fn argmax(&self) -> AttributeId {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        AttributeId::ALL[best]
    }
}

/// Diagonal Gaussian summary of encoder outputs, used to sample latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            std: alloc::vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits per-coordinate mean and standard deviation to a `[N, d]` batch.
    pub fn fit(codes: &Tensor) -> Self {
        let (n, d) = (codes.shape()[0], codes.shape()[1]);
        let mut mean = alloc::vec![0.0; d];
        for row in codes.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = alloc::vec![0.0; d];
        for row in codes.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| libm::sqrt(s / n as f64).max(1e-6)).collect();
        Self { mean, std }
    }

    /// `count` latents with every standardized component in
    /// `[-truncation, truncation]`; out-of-range components are redrawn.
    pub fn sample(&self, count: usize, truncation: f64, seed: u64) -> Result<Vec<LatentVector>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, count, truncation)
    }

    pub fn sample_with(
        &self,
        rng: &mut ChaCha8Rng,
        count: usize,
        truncation: f64,
    ) -> Result<Vec<LatentVector>, ModelError> {
        if !(truncation > 0.0) {
            return Err(ModelError::InvalidConfig("truncation must be positive"));
        }
        Ok((0..count)
            .map(|_| {
                LatentVector(
                    self.mean
                        .iter()
                        .zip(&self.std)
                        .map(|(m, s)| loop {
                            let e: f64 = StandardNormal.sample(rng);
                            if e.abs() <= truncation {
                                break m + s * e;
                            }
                        })
                        .collect(),
                )
            })
            .collect())
    }

    /// Standardized coordinates of `z`.
    pub fn standardize(&self, z: &LatentVector) -> Vec<f64> {
        z.0.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Parameters held by a training run just before its loss went non-finite.
#[derive(Debug, Clone, PartialEq)]
pub enum LastFinite {
    Generator(GeneratorParams),
    Scorer(ScorerParams),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("class {class} out of range for {count} classes")]
    InvalidClass { class: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("backbone parameters are frozen")]
    FrozenParameter,
    #[error("head retraining requires a frozen backbone")]
    BackboneNotFrozen,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_finite: Box<LastFinite> },
    #[error("missing or malformed parameter tensor {0:?}")]
    BadTensor(String),
}

/// A differentiable class-conditional generator `G(z, y)`.
pub trait Generator {
    fn z_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn latent(&self) -> &LatentGaussian;
    fn digest(&self) -> ContentDigest;
    /// Output batch for a `[N, z_dim]` latent batch and `N` class indices.
    fn generate(&self, tape: &mut Tape, z: Var, classes: &[usize]) -> Result<Var, ModelError>;
}

/// A differentiable attribute scorer `S(x)`.
pub trait Scorer {
    fn digest(&self) -> ContentDigest;
    /// Score of `attribute` for each row of an output batch, shape `[N, 1]`.
    fn attribute_score(&self, tape: &mut Tape, images: Var, attribute: AttributeId) -> Result<Var, ModelError>;
}

pub(crate) fn check_latent_batch(tape: &Tape, z: Var, dim: usize, classes: &[usize], count: usize) -> Result<(), ModelError> {
    let s = tape.value(z).shape();
    if s.len() != 2 || s[1] != dim {
        return Err(ModelError::DimensionMismatch {
            what: "latent",
            expected: dim,
            actual: s.get(1).copied().unwrap_or(0),
        });
    }
    if s[0] != classes.len() {
        return Err(ModelError::DimensionMismatch {
            what: "class labels",
            expected: s[0],
            actual: classes.len(),
        });
    }
    if let Some(&class) = classes.iter().find(|&&c| c >= count) {
        return Err(ModelError::InvalidClass { class, count });
    }
    Ok(())
}
