use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use super::training::{cosine_rate, epoch_batches, init_uniform, one_hot};
use super::{check_latent_batch, ClassLabel, Generator, LastFinite, LatentGaussian, LatentVector, ModelError};
use crate::autodiff::{AutodiffError, Optimizer, OptimizerConfig, Tape, Var};
use crate::image::GrayImage;
use crate::tensor::{ContentDigest, Tensor};

/// Architecture of the class-conditional decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub z_dim: usize,
    pub embed_dim: usize,
    /// Channels of the projected `image_size/4` feature map.
    pub base_channels: usize,
    /// Channels after the first upsample stage.
    pub mid_channels: usize,
    pub class_count: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            z_dim: 16,
            embed_dim: 8,
            base_channels: 16,
            mid_channels: 8,
            class_count: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(ModelError::InvalidConfig("image size must be a positive multiple of 4"));
        }
        if [self.z_dim, self.embed_dim, self.base_channels, self.mid_channels, self.class_count].contains(&0) {
            return Err(ModelError::InvalidConfig("generator dimensions must be positive"));
        }
        Ok(())
    }

    fn base_size(&self) -> usize {
        self.image_size / 4
    }

    fn projected(&self) -> usize {
        self.base_channels * self.base_size() * self.base_size()
    }
}

/// Decoder `G(z, y)`: class embedding, dense projection, two
/// upsample+conv stages, sigmoid output. Also carries the latent Gaussian
/// that latents are sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    config: GeneratorConfig,
    tensors: [Tensor; 8],
    latent: LatentGaussian,
}

/// Tape handles for the eight decoder tensors.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars([Var; 8]);

impl GeneratorParams {
    /// Decoder tensor names, in storage and checkpoint order.
    pub const TENSOR_NAMES: [&'static str; 8] = [
        "class_embedding",
        "projection.latent",
        "projection.class",
        "projection.bias",
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
    ];

    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, k) = (config.z_dim, config.embed_dim, config.class_count);
        let (c0, c1, f) = (config.base_channels, config.mid_channels, config.projected());
        let tensors = [
            init_uniform(&mut rng, &[k, e], 2, 1.0),
            init_uniform(&mut rng, &[d, f], d + e, 1.0),
            init_uniform(&mut rng, &[e, f], d + e, 1.0),
            Tensor::zeros(&[f]),
            init_uniform(&mut rng, &[c1, c0, 3, 3], c0 * 9, 1.0),
            Tensor::zeros(&[c1]),
            init_uniform(&mut rng, &[1, c1, 3, 3], c1 * 9, 0.5),
            // Dark background is the common case.
            Tensor::full(&[1], -2.0),
        ];
        Ok(Self {
            config,
            tensors,
            latent: LatentGaussian::standard(d),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor; 8] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        self.tensors.each_mut()
    }

    pub fn set_latent(&mut self, latent: LatentGaussian) -> Result<(), ModelError> {
        if latent.dim() != self.config.z_dim {
            return Err(ModelError::DimensionMismatch {
                what: "latent gaussian",
                expected: self.config.z_dim,
                actual: latent.dim(),
            });
        }
        self.latent = latent;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Every tensor including the latent mean and std, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let d = self.config.z_dim;
        let mut out: Vec<(&'static str, Tensor)> = Self::TENSOR_NAMES
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (*n, t.clone()))
            .collect();
        out.push(("latent.mean", Tensor::from_vec(vec![d], self.latent.mean.clone()).expect("dim")));
        out.push(("latent.std", Tensor::from_vec(vec![d], self.latent.std.clone()).expect("dim")));
        out
    }

    pub fn from_named_tensors(config: GeneratorConfig, named: &[(&str, Tensor)]) -> Result<Self, ModelError> {
        let reference = Self::init(config, 0)?;
        let find = |name: &str, shape: &[usize]| -> Result<Tensor, ModelError> {
            named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .filter(|t| t.shape() == shape)
                .ok_or_else(|| ModelError::BadTensor(name.to_string()))
        };
        let mut tensors = reference.tensors.clone();
        for (slot, (name, r)) in tensors
            .iter_mut()
            .zip(Self::TENSOR_NAMES.iter().zip(&reference.tensors))
        {
            *slot = find(name, r.shape())?;
        }
        let d = config.z_dim;
        let latent = LatentGaussian {
            mean: find("latent.mean", &[d])?.into_data(),
            std: find("latent.std", &[d])?.into_data(),
        };
        Ok(Self {
            config,
            tensors,
            latent,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        GeneratorVars(self.tensors.each_ref().map(|t| {
            if trainable {
                tape.parameter(t.clone())
            } else {
                tape.constant(t.clone())
            }
        }))
    }

    /// Decodes a `[N, z_dim]` latent batch into `[N, 1, H, W]` images.
    pub fn decode(&self, tape: &mut Tape, vars: &GeneratorVars, z: Var, classes: &[usize]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        check_latent_batch(tape, z, cfg.z_dim, classes, cfg.class_count)?;
        let n = classes.len();
        let [embedding, proj_z, proj_y, proj_b, w1, b1, w2, b2] = vars.0;
        let onehot = tape.constant(one_hot(classes, cfg.class_count));
        let e = tape.matmul(onehot, embedding)?;
        let hz = tape.matmul(z, proj_z)?;
        let hy = tape.matmul(e, proj_y)?;
        let h = tape.add(hz, hy)?;
        let h = tape.bias_add(h, proj_b)?;
        let h = tape.relu(h)?;
        let s = cfg.base_size();
        let h = tape.reshape(h, &[n, cfg.base_channels, s, s])?;
        let h = tape.upsample2x(h)?;
        let h = tape.conv2d(h, w1, 1)?;
        let h = tape.bias_add(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.upsample2x(h)?;
        let h = tape.conv2d(h, w2, 1)?;
        let h = tape.bias_add(h, b2)?;
        Ok(tape.sigmoid(h)?)
    }

    /// `G(z, y)` for a single latent.
    pub fn forward(&self, z: &LatentVector, y: ClassLabel) -> Result<GrayImage, ModelError> {
        Ok(self.forward_batch(core::slice::from_ref(z), &[y.0])?.remove(0))
    }

    pub fn forward_batch(&self, zs: &[LatentVector], classes: &[usize]) -> Result<Vec<GrayImage>, ModelError> {
        if let Some(z) = zs.iter().find(|z| z.dim() != self.config.z_dim) {
            return Err(ModelError::DimensionMismatch {
                what: "latent",
                expected: self.config.z_dim,
                actual: z.dim(),
            });
        }
        let mut tape = Tape::new();
        let z = tape.constant(LatentVector::batch(zs));
        let out = self.generate(&mut tape, z, classes)?;
        Ok(GrayImage::unbatch(tape.value(out)))
    }

    /// Latents from the fitted Gaussian, truncated at `truncation` standard
    /// deviations.
    pub fn sample_latent(&self, count: usize, truncation: f64, seed: u64) -> Result<Vec<LatentVector>, ModelError> {
        self.latent.sample(count, truncation, seed)
    }
}

impl Generator for GeneratorParams {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn latent(&self) -> &LatentGaussian {
        &self.latent
    }

    fn digest(&self) -> ContentDigest {
        let named = self.named_tensors();
        ContentDigest::of_tensors(named.iter().map(|(_, t)| t))
    }

    fn generate(&self, tape: &mut Tape, z: Var, classes: &[usize]) -> Result<Var, ModelError> {
        let vars = self.bind(tape, false);
        self.decode(tape, &vars, z, classes)
    }
}

/// Convolutional encoder used only while training the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    tensors: [Tensor; 6],
}

impl EncoderParams {
    pub fn init(config: &GeneratorConfig, channels: [usize; 2], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if channels.contains(&0) {
            return Err(ModelError::InvalidConfig("encoder channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = channels;
        let s = config.image_size / 4;
        let flat = c2 * s * s;
        Ok(Self {
            tensors: [
                init_uniform(&mut rng, &[c1, 1, 3, 3], 9, 1.0),
                Tensor::zeros(&[c1]),
                init_uniform(&mut rng, &[c2, c1, 3, 3], c1 * 9, 1.0),
                Tensor::zeros(&[c2]),
                init_uniform(&mut rng, &[flat, config.z_dim], flat, 1.0),
                Tensor::zeros(&[config.z_dim]),
            ],
        })
    }

    pub fn tensors(&self) -> &[Tensor; 6] {
        &self.tensors
    }

    pub fn from_tensors(tensors: [Tensor; 6]) -> Self {
        Self { tensors }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 6] {
        self.tensors.each_ref().map(|t| {
            if trainable {
                tape.parameter(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn encode(&self, tape: &mut Tape, vars: &[Var; 6], images: Var) -> Result<Var, AutodiffError> {
        let [w1, b1, w2, b2, wd, bd] = *vars;
        let n = tape.value(images).shape()[0];
        let h = tape.conv2d(images, w1, 2)?;
        let h = tape.bias_add(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, w2, 2)?;
        let h = tape.bias_add(h, b2)?;
        let h = tape.relu(h)?;
        let flat = tape.value(h).len() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let z = tape.matmul(h, wd)?;
        tape.bias_add(z, bd)
    }
}

/// Encoder + decoder pair trained on pixel reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: EncoderParams,
    pub decoder: GeneratorParams,
}

impl Autoencoder {
    pub fn init(config: GeneratorConfig, training: &GeneratorTraining) -> Result<Self, ModelError> {
        Ok(Self {
            encoder: EncoderParams::init(&config, training.encoder_channels, training.seed ^ 0x5eed_e4c0)?,
            decoder: GeneratorParams::init(config, training.seed)?,
        })
    }

    fn batch(data: &[(&GrayImage, usize)], idx: &[usize]) -> Result<(Tensor, Vec<usize>), ModelError> {
        let imgs: Vec<&GrayImage> = idx.iter().map(|&i| data[i].0).collect();
        let x = GrayImage::batch(&imgs).ok_or(ModelError::DimensionMismatch {
            what: "image batch",
            expected: imgs[0].width(),
            actual: 0,
        })?;
        Ok((x, idx.iter().map(|&i| data[i].1).collect()))
    }

    /// Latent codes for every image, `[N, z_dim]`.
    pub fn encode_all(&self, data: &[(&GrayImage, usize)]) -> Result<Tensor, ModelError> {
        let d = self.decoder.config.z_dim;
        let mut codes = Vec::with_capacity(data.len() * d);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(128) {
            let (x, _) = Self::batch(data, chunk)?;
            let mut tape = Tape::new();
            let vars = self.encoder.bind(&mut tape, false);
            let xv = tape.constant(x);
            let z = self.encoder.encode(&mut tape, &vars, xv)?;
            codes.extend_from_slice(tape.value(z).data());
        }
        Tensor::from_vec(vec![data.len(), d], codes).map_err(|_| ModelError::EmptyDataset)
    }

    /// Encode-then-decode images for `data`.
    pub fn reconstruct(&self, data: &[(&GrayImage, usize)]) -> Result<Vec<GrayImage>, ModelError> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(128) {
            let (x, classes) = Self::batch(data, chunk)?;
            let mut tape = Tape::new();
            let ev = self.encoder.bind(&mut tape, false);
            let dv = self.decoder.bind(&mut tape, false);
            let xv = tape.constant(x);
            let z = self.encoder.encode(&mut tape, &ev, xv)?;
            let recon = self.decoder.decode(&mut tape, &dv, z, &classes)?;
            out.extend(GrayImage::unbatch(tape.value(recon)));
        }
        Ok(out)
    }

    /// Mean squared pixel error of encode-then-decode over `data`.
    pub fn reconstruction_mse(&self, data: &[(&GrayImage, usize)]) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in idx.chunks(128) {
            let (x, classes) = Self::batch(data, chunk)?;
            let mut tape = Tape::new();
            let ev = self.encoder.bind(&mut tape, false);
            let dv = self.decoder.bind(&mut tape, false);
            let xv = tape.constant(x);
            let z = self.encoder.encode(&mut tape, &ev, xv)?;
            let recon = self.decoder.decode(&mut tape, &dv, z, &classes)?;
            let loss = tape.mse(recon, xv)?;
            let n = tape.value(xv).len();
            total += tape.value(loss).item() * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

/// Optimisation settings for [`train_generator`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_floor: f64,
    /// Weight of the mean squared latent code penalty.
    pub latent_penalty: f64,
    /// Std of Gaussian noise added to codes before decoding, so the decoder
    /// sees the neighbourhood of each code and not just the point.
    pub latent_noise: f64,
    pub encoder_channels: [usize; 2],
    pub seed: u64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-2,
            lr_floor: 0.05,
            latent_penalty: 1e-3,
            latent_noise: 0.1,
            encoder_channels: [8, 16],
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub generator: GeneratorParams,
    pub encoder: EncoderParams,
    /// Reconstruction MSE over the training set after the final step.
    pub final_mse: f64,
    /// Per-step minibatch reconstruction MSE.
    pub loss_curve: Vec<f64>,
}

/// Trains an encoder-decoder on pixel reconstruction and returns the
/// decoder with a Gaussian fitted to the encoder outputs.
///
/// `data` pairs each image with its class label `y`.
pub fn train_generator(
    data: &[(&GrayImage, usize)],
    config: GeneratorConfig,
    training: &GeneratorTraining,
) -> Result<TrainedGenerator, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if training.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch size must be positive"));
    }
    if let Some((img, _)) = data.iter().find(|(img, _)| img.width() != config.image_size || img.height() != config.image_size) {
        return Err(ModelError::DimensionMismatch {
            what: "training image",
            expected: config.image_size,
            actual: img.width(),
        });
    }
    let mut model = Autoencoder::init(config, training)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(training.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let indices: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(training.batch_size);
    let total = steps_per_epoch * training.epochs;
    let mut loss_curve = Vec::with_capacity(total);
    let diverged = |step: usize, model: &Autoencoder| ModelError::Diverged {
        step,
        last_finite: Box::new(LastFinite::Generator(model.decoder.clone())),
    };

    // One shuffle, then the same minibatch order every epoch, so a window of
    // one epoch compares like with like across the loss curve.
    let batches = epoch_batches(&indices, training.batch_size, &mut rng);
    for _ in 0..training.epochs {
        for batch in &batches {
            let step = loss_curve.len();
            opt.set_learning_rate(cosine_rate(training.learning_rate, training.lr_floor, step, total))?;
            let (x, classes) = Autoencoder::batch(data, batch)?;
            let noise = (training.latent_noise > 0.0).then(|| {
                Tensor::from_fn(&[batch.len(), config.z_dim], |_| {
                    training.latent_noise * rng.sample::<f64, _>(StandardNormal)
                })
            });
            let mut tape = Tape::new();
            let ev = model.encoder.bind(&mut tape, true);
            let dv = model.decoder.bind(&mut tape, true);
            let forward = |tape: &mut Tape| -> Result<(Var, Var), ModelError> {
                let xv = tape.constant(x);
                let z = model.encoder.encode(tape, &ev, xv)?;
                let noisy = match noise {
                    Some(n) => {
                        let n = tape.constant(n);
                        tape.add(z, n)?
                    }
                    None => z,
                };
                let recon = model.decoder.decode(tape, &dv, noisy, &classes)?;
                let rec = tape.mse(recon, xv)?;
                let loss = if training.latent_penalty > 0.0 {
                    let zero = tape.constant(Tensor::zeros(tape.value(z).shape()));
                    let pen = tape.mse(z, zero)?;
                    let pen = tape.scale(pen, training.latent_penalty)?;
                    tape.add(rec, pen)?
                } else {
                    rec
                };
                Ok((rec, loss))
            };
            let (rec, loss) = match forward(&mut tape) {
                Ok(v) => v,
                Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => return Err(diverged(step, &model)),
                Err(e) => return Err(e),
            };
            let grads = tape.backward(loss)?;
            let enc_grads: Vec<&Tensor> = ev.iter().map(|v| grads.of(*v)).collect();
            let dec_grads: Vec<&Tensor> = dv.0.iter().map(|v| grads.of(*v)).collect();
            let all_grads: Vec<&Tensor> = enc_grads.into_iter().chain(dec_grads).collect();
            let mut leaves: Vec<&mut Tensor> = model
                .encoder
                .tensors
                .iter_mut()
                .chain(model.decoder.tensors.iter_mut())
                .collect();
            match opt.step(&mut leaves, &all_grads) {
                Ok(()) => {}
                Err(AutodiffError::NonFiniteGradient { .. }) => return Err(diverged(step, &model)),
                Err(e) => return Err(e.into()),
            }
            loss_curve.push(tape.value(rec).item());
        }
    }

    let codes = model.encode_all(data)?;
    model.decoder.set_latent(LatentGaussian::fit(&codes))?;
    let final_mse = model.reconstruction_mse(data)?;
    Ok(TrainedGenerator {
        generator: model.decoder,
        encoder: model.encoder,
        final_mse,
        loss_curve,
    })
}
