use alloc::vec::Vec;

use super::{check_latent_batch, Generator, LatentGaussian, ModelError, Scorer};
use crate::autodiff::{Tape, Var};
use crate::shapeworld::AttributeId;
use crate::tensor::{ContentDigest, Tensor};

/// `G(z) = zW + b` with a single class. Output rows are flat `P`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGenerator {
    weight: Tensor,
    bias: Tensor,
    latent: LatentGaussian,
}

impl LinearGenerator {
    /// `weight` is `[d, P]`, `bias` is `[P]`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, ModelError> {
        let ws = weight.shape();
        if ws.len() != 2 {
            return Err(ModelError::BadTensor("weight".into()));
        }
        if bias.shape() != [ws[1]] {
            return Err(ModelError::DimensionMismatch {
                what: "linear generator bias",
                expected: ws[1],
                actual: bias.len(),
            });
        }
        let d = ws[0];
        Ok(Self {
            weight,
            bias,
            latent: LatentGaussian::standard(d),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Generator for LinearGenerator {
    fn z_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn class_count(&self) -> usize {
        1
    }

    fn latent(&self) -> &LatentGaussian {
        &self.latent
    }

    fn digest(&self) -> ContentDigest {
        ContentDigest::of_tensors([&self.weight, &self.bias])
    }

    fn generate(&self, tape: &mut Tape, z: Var, classes: &[usize]) -> Result<Var, ModelError> {
        check_latent_batch(tape, z, self.z_dim(), classes, 1)?;
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let h = tape.matmul(z, w)?;
        Ok(tape.bias_add(h, b)?)
    }
}

/// `S(x) = x·w + c`, the same value for every attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    weight: Tensor,
    bias: f64,
}

impl LinearScorer {
    pub fn new(weights: &[f64], bias: f64) -> Self {
        Self {
            weight: Tensor::column(weights),
            bias,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Plain evaluation on a flat vector.
    pub fn score_flat(&self, x: &[f64]) -> f64 {
        self.weight.data().iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

impl Scorer for LinearScorer {
    fn digest(&self) -> ContentDigest {
        ContentDigest::of_tensors([&self.weight, &Tensor::scalar(self.bias)])
    }

    fn attribute_score(&self, tape: &mut Tape, images: Var, _attribute: AttributeId) -> Result<Var, ModelError> {
        let s: Vec<usize> = tape.value(images).shape().to_vec();
        let n = s.first().copied().unwrap_or(0);
        let p = self.weight.shape()[0];
        if n == 0 || s.iter().skip(1).product::<usize>() != p {
            return Err(ModelError::DimensionMismatch {
                what: "linear scorer input",
                expected: p,
                actual: s.iter().skip(1).product(),
            });
        }
        let flat = tape.reshape(images, &[n, p])?;
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(Tensor::from_vec(alloc::vec![1], alloc::vec![self.bias]).expect("bias"));
        let h = tape.matmul(flat, w)?;
        Ok(tape.bias_add(h, b)?)
    }
}
