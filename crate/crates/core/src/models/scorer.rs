use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::training::{argmax_rows, cosine_rate, epoch_batches, holdout_split, init_uniform};
use super::{LastFinite, ModelError, ScoreVector, Scorer};
use crate::autodiff::{AutodiffError, Optimizer, OptimizerConfig, Tape, Var};
use crate::image::GrayImage;
use crate::shapeworld::AttributeId;
use crate::tensor::{ContentDigest, Tensor};

/// Architecture of the convolutional scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScorerConfig {
    pub image_size: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub outputs: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels1: 12,
            channels2: 48,
            outputs: 4,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(ModelError::InvalidConfig("image size must be a positive multiple of 4"));
        }
        if [self.channels1, self.channels2, self.outputs].contains(&0) {
            return Err(ModelError::InvalidConfig("scorer dimensions must be positive"));
        }
        Ok(())
    }
}

/// Scorer `S(x)`: two strided convolutions and a global average pool form
/// the backbone; a dense softmax layer is the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    config: ScorerConfig,
    tensors: [Tensor; 6],
    frozen_backbone: bool,
}

/// Tape handles for the six scorer tensors.
#[derive(Debug, Clone, Copy)]
pub struct ScorerVars([Var; 6]);

const BACKBONE: usize = 4;

impl ScorerParams {
    pub const TENSOR_NAMES: [&'static str; 6] = [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "head.weight",
        "head.bias",
    ];

    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, k) = (config.channels1, config.channels2, config.outputs);
        Ok(Self {
            config,
            tensors: [
                init_uniform(&mut rng, &[c1, 1, 3, 3], 9, 1.0),
                Tensor::zeros(&[c1]),
                init_uniform(&mut rng, &[c2, c1, 3, 3], c1 * 9, 1.0),
                Tensor::zeros(&[c2]),
                Tensor::zeros(&[c2, k]),
                Tensor::zeros(&[k]),
            ],
            frozen_backbone: false,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor; 6] {
        &self.tensors
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.tensors[4]
    }

    pub fn head_weight_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[4]
    }

    pub fn head_mut(&mut self) -> [&mut Tensor; 2] {
        let [.., w, b] = &mut self.tensors;
        [w, b]
    }

    /// Mutable backbone tensors; refused once the backbone is frozen.
    pub fn backbone_mut(&mut self) -> Result<[&mut Tensor; BACKBONE], ModelError> {
        if self.frozen_backbone {
            return Err(ModelError::FrozenParameter);
        }
        let [w1, b1, w2, b2, ..] = &mut self.tensors;
        Ok([w1, b1, w2, b2])
    }

    pub fn freeze_backbone(&mut self) {
        self.frozen_backbone = true;
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.frozen_backbone
    }

    pub fn backbone_digest(&self) -> ContentDigest {
        ContentDigest::of_tensors(&self.tensors[..BACKBONE])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.tensors[BACKBONE..].iter().map(Tensor::len).sum()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, Tensor)> {
        Self::TENSOR_NAMES
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (*n, t.clone()))
            .collect()
    }

    pub fn from_named_tensors(
        config: ScorerConfig,
        named: &[(&str, Tensor)],
        frozen_backbone: bool,
    ) -> Result<Self, ModelError> {
        let mut out = Self::init(config, 0)?;
        for (slot, name) in out.tensors.iter_mut().zip(Self::TENSOR_NAMES) {
            let found = named
                .iter()
                .find(|(n, _)| *n == name)
                .filter(|(_, t)| t.shape() == slot.shape())
                .ok_or_else(|| ModelError::BadTensor(name.to_string()))?;
            *slot = found.1.clone();
        }
        out.frozen_backbone = frozen_backbone;
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape, train_backbone: bool, train_head: bool) -> ScorerVars {
        let mut i = 0;
        ScorerVars(self.tensors.each_ref().map(|t| {
            let trainable = if i < BACKBONE { train_backbone } else { train_head };
            i += 1;
            if trainable {
                tape.parameter(t.clone())
            } else {
                tape.constant(t.clone())
            }
        }))
    }

    fn check_images(&self, tape: &Tape, x: Var) -> Result<(), ModelError> {
        let s = tape.value(x).shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(ModelError::DimensionMismatch {
                what: "scorer input",
                expected: size,
                actual: s.get(3).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Pooled backbone features, `[N, channels2]`.
    pub fn features(&self, tape: &mut Tape, vars: &ScorerVars, x: Var) -> Result<Var, ModelError> {
        self.check_images(tape, x)?;
        let [w1, b1, w2, b2, ..] = vars.0;
        let h = tape.conv2d(x, w1, 2)?;
        let h = tape.bias_add(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, w2, 2)?;
        let h = tape.bias_add(h, b2)?;
        let h = tape.relu(h)?;
        Ok(tape.spatial_mean(h)?)
    }

    fn head(&self, tape: &mut Tape, vars: &ScorerVars, features: Var) -> Result<Var, ModelError> {
        let [.., w, b] = vars.0;
        let h = tape.matmul(features, w)?;
        Ok(tape.bias_add(h, b)?)
    }

    pub fn logits(&self, tape: &mut Tape, vars: &ScorerVars, x: Var) -> Result<Var, ModelError> {
        let f = self.features(tape, vars, x)?;
        self.head(tape, vars, f)
    }

    /// Softmax over the outputs, `[N, outputs]`.
    pub fn probabilities(&self, tape: &mut Tape, vars: &ScorerVars, x: Var) -> Result<Var, ModelError> {
        let l = self.logits(tape, vars, x)?;
        Ok(tape.softmax(l)?)
    }

    fn batch_tensor(&self, images: &[&GrayImage]) -> Result<Tensor, ModelError> {
        let size = self.config.image_size;
        match images.iter().find(|i| i.width() != size || i.height() != size) {
            Some(img) => Err(ModelError::DimensionMismatch {
                what: "scorer input",
                expected: size,
                actual: img.width(),
            }),
            None => GrayImage::batch(images).ok_or(ModelError::EmptyDataset),
        }
    }

    /// Output probabilities for each image.
    pub fn probabilities_batch(&self, images: &[&GrayImage]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(images.len() * self.config.outputs);
        for chunk in images.chunks(128) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false, false);
            let x = tape.constant(self.batch_tensor(chunk)?);
            let p = self.probabilities(&mut tape, &vars, x)?;
            data.extend_from_slice(tape.value(p).data());
        }
        Tensor::from_vec(alloc::vec![images.len(), self.config.outputs], data).map_err(|_| ModelError::EmptyDataset)
    }

    /// Attribute probabilities of a single image.
    pub fn score(&self, image: &GrayImage) -> Result<ScoreVector, ModelError> {
        if self.config.outputs != 4 {
            return Err(ModelError::DimensionMismatch {
                what: "attribute outputs",
                expected: 4,
                actual: self.config.outputs,
            });
        }
        let p = self.probabilities_batch(&[image])?;
        let d = p.data();
        Ok(ScoreVector([d[0], d[1], d[2], d[3]]))
    }

    /// Pooled backbone features for each image, `[N, channels2]`.
    pub fn features_batch(&self, images: &[&GrayImage]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(images.len() * self.config.channels2);
        for chunk in images.chunks(128) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false, false);
            let x = tape.constant(self.batch_tensor(chunk)?);
            let f = self.features(&mut tape, &vars, x)?;
            data.extend_from_slice(tape.value(f).data());
        }
        Tensor::from_vec(alloc::vec![images.len(), self.config.channels2], data).map_err(|_| ModelError::EmptyDataset)
    }

    /// Fraction of `data` rows whose argmax output equals the label.
    pub fn accuracy(&self, data: &[(&GrayImage, usize)]) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let images: Vec<&GrayImage> = data.iter().map(|(i, _)| *i).collect();
        let predicted = argmax_rows(&self.probabilities_batch(&images)?);
        let hits = predicted.iter().zip(data).filter(|(p, (_, y))| *p == y).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

impl Scorer for ScorerParams {
    fn digest(&self) -> ContentDigest {
        ContentDigest::of_tensors(&self.tensors)
    }

    fn attribute_score(&self, tape: &mut Tape, images: Var, attribute: AttributeId) -> Result<Var, ModelError> {
        if self.config.outputs != 4 {
            return Err(ModelError::DimensionMismatch {
                what: "attribute outputs",
                expected: 4,
                actual: self.config.outputs,
            });
        }
        let vars = self.bind(tape, false, false);
        let p = self.probabilities(tape, &vars, images)?;
        let select = tape.constant(attribute.one_hot_column());
        Ok(tape.matmul(p, select)?)
    }
}

/// Optimisation settings for scorer training.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    /// Settings for backbone pretraining.
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-2,
            lr_floor: 0.05,
            holdout_fraction: 0.2,
            seed: 23,
        }
    }
}

impl ClassifierTraining {
    /// Settings for head retraining. The head is a convex problem on cached
    /// features, so many cheap epochs are affordable.
    pub fn head() -> Self {
        Self {
            epochs: 200,
            learning_rate: 3e-2,
            seed: 29,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedScorer {
    pub params: ScorerParams,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub loss_curve: Vec<f64>,
    /// Indices into the training data that were held out.
    pub holdout: Vec<usize>,
}

fn validate_training(data: &[(&GrayImage, usize)], config: &ScorerConfig, t: &ClassifierTraining) -> Result<(), ModelError> {
    if data.len() < 2 {
        return Err(ModelError::EmptyDataset);
    }
    if t.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch size must be positive"));
    }
    if !(0.0..1.0).contains(&t.holdout_fraction) {
        return Err(ModelError::InvalidConfig("holdout fraction must be in [0, 1)"));
    }
    if let Some(&(_, class)) = data.iter().find(|(_, y)| *y >= config.outputs) {
        return Err(ModelError::InvalidClass {
            class,
            count: config.outputs,
        });
    }
    Ok(())
}

fn subset<'a>(data: &[(&'a GrayImage, usize)], idx: &[usize]) -> Vec<(&'a GrayImage, usize)> {
    idx.iter().map(|&i| data[i]).collect()
}

fn diverged(step: usize, params: &ScorerParams) -> ModelError {
    ModelError::Diverged {
        step,
        last_finite: Box::new(LastFinite::Scorer(params.clone())),
    }
}

fn absorb_nonfinite<T>(r: Result<T, ModelError>, step: usize, params: &ScorerParams) -> Result<T, ModelError> {
    match r {
        Err(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
        | Err(ModelError::Autodiff(AutodiffError::NonFiniteGradient { .. })) => Err(diverged(step, params)),
        other => other,
    }
}

/// Trains backbone and head jointly with softmax cross-entropy on
/// `(image, class)` pairs. The returned backbone is frozen.
pub fn pretrain_scorer_backbone(
    data: &[(&GrayImage, usize)],
    config: ScorerConfig,
    training: &ClassifierTraining,
) -> Result<TrainedScorer, ModelError> {
    validate_training(data, &config, training)?;
    let mut params = ScorerParams::init(config, training.seed)?;
    // The head starts at zero; give it a small random start so the
    // backbone receives gradient from the first step.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(training.seed ^ 0x4ead);
        *params.head_weight_mut() = init_uniform(&mut rng, &[config.channels2, config.outputs], config.channels2, 1.0);
    }
    let (train_idx, holdout) = holdout_split(data.len(), training.holdout_fraction, training.seed);
    let mut opt = Optimizer::new(OptimizerConfig::adam(training.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed.wrapping_add(1));
    let total = train_idx.len().div_ceil(training.batch_size) * training.epochs;
    let mut loss_curve = Vec::with_capacity(total);

    for _ in 0..training.epochs {
        for batch in epoch_batches(&train_idx, training.batch_size, &mut rng) {
            let step = loss_curve.len();
            opt.set_learning_rate(cosine_rate(training.learning_rate, training.lr_floor, step, total))?;
            let rows = subset(data, &batch);
            let images: Vec<&GrayImage> = rows.iter().map(|(i, _)| *i).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true, true);
            let x = tape.constant(params.batch_tensor(&images)?);
            let loss = absorb_nonfinite(
                params
                    .logits(&mut tape, &vars, x)
                    .and_then(|l| Ok(tape.softmax_cross_entropy(l, &labels)?)),
                step,
                &params,
            )?;
            let grads = tape.backward(loss)?;
            let g: Vec<&Tensor> = vars.0.iter().map(|v| grads.of(*v)).collect();
            let mut leaves: Vec<&mut Tensor> = params.tensors.iter_mut().collect();
            absorb_nonfinite(opt.step(&mut leaves, &g).map_err(ModelError::from), step, &params)?;
            loss_curve.push(tape.value(loss).item());
        }
    }
    params.freeze_backbone();
    let train_accuracy = params.accuracy(&subset(data, &train_idx))?;
    let holdout_accuracy = if holdout.is_empty() {
        train_accuracy
    } else {
        params.accuracy(&subset(data, &holdout))?
    };
    Ok(TrainedScorer {
        params,
        train_accuracy,
        holdout_accuracy,
        loss_curve,
        holdout,
    })
}

/// Fits a fresh zero-initialised head on top of a frozen backbone.
/// Backbone tensors are bit-identical before and after.
pub fn retrain_scorer_head(
    backbone: &ScorerParams,
    data: &[(&GrayImage, usize)],
    training: &ClassifierTraining,
) -> Result<TrainedScorer, ModelError> {
    if !backbone.frozen_backbone {
        return Err(ModelError::BackboneNotFrozen);
    }
    validate_training(data, &backbone.config, training)?;
    let mut params = backbone.clone();
    for t in params.head_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let images: Vec<&GrayImage> = data.iter().map(|(i, _)| *i).collect();
    let features = params.features_batch(&images)?;
    let c2 = params.config.channels2;
    let rows_of = |idx: &[usize]| -> Tensor {
        let mut d = Vec::with_capacity(idx.len() * c2);
        for &i in idx {
            d.extend_from_slice(&features.data()[i * c2..(i + 1) * c2]);
        }
        Tensor::from_vec(alloc::vec![idx.len(), c2], d).expect("feature rows")
    };

    let (train_idx, holdout) = holdout_split(data.len(), training.holdout_fraction, training.seed);
    let mut opt = Optimizer::new(OptimizerConfig::adam(training.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed.wrapping_add(1));
    let total = train_idx.len().div_ceil(training.batch_size) * training.epochs;
    let mut loss_curve = Vec::with_capacity(total);

    for _ in 0..training.epochs {
        for batch in epoch_batches(&train_idx, training.batch_size, &mut rng) {
            let step = loss_curve.len();
            opt.set_learning_rate(cosine_rate(training.learning_rate, training.lr_floor, step, total))?;
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false, true);
            let f = tape.constant(rows_of(&batch));
            let loss = absorb_nonfinite(
                params
                    .head(&mut tape, &vars, f)
                    .and_then(|l| Ok(tape.softmax_cross_entropy(l, &labels)?)),
                step,
                &params,
            )?;
            let grads = tape.backward(loss)?;
            let g = [grads.of(vars.0[4]), grads.of(vars.0[5])];
            absorb_nonfinite(opt.step(&mut params.head_mut(), &g).map_err(ModelError::from), step, &params)?;
            loss_curve.push(tape.value(loss).item());
        }
    }
    let train_accuracy = params.accuracy(&subset(data, &train_idx))?;
    let holdout_accuracy = if holdout.is_empty() {
        train_accuracy
    } else {
        params.accuracy(&subset(data, &holdout))?
    };
    Ok(TrainedScorer {
        params,
        train_accuracy,
        holdout_accuracy,
        loss_curve,
        holdout,
    })
}
