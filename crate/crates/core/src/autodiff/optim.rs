use alloc::vec::Vec;

use super::AutodiffError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::adam(learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Plain SGD or Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self, AutodiffError> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(AutodiffError::InvalidLearningRate);
        }
        Ok(Self {
            config,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<(), AutodiffError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(AutodiffError::InvalidLearningRate);
        }
        self.config.learning_rate = learning_rate;
        Ok(())
    }

    /// Applies one update. Nothing is modified if any gradient is rejected.
    pub fn step(&mut self, leaves: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), AutodiffError> {
        if leaves.len() != grads.len() {
            return Err(AutodiffError::LeafCount {
                expected: leaves.len(),
                actual: grads.len(),
            });
        }
        for (index, (leaf, grad)) in leaves.iter().zip(grads).enumerate() {
            if leaf.shape() != grad.shape() {
                return Err(AutodiffError::GradientShape {
                    index,
                    gradient: grad.shape().to_vec(),
                    parameter: leaf.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { index });
            }
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (leaf, grad) in leaves.iter_mut().zip(grads) {
                    leaf.add_scaled(grad, -lr);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = (self.steps + 1) as f64;
                let OptimizerConfig {
                    beta1, beta2, epsilon, ..
                } = self.config;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (((leaf, grad), m), v) in leaves
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((p, g), m), v) in leaf
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}
