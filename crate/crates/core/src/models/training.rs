use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Deterministic split of `0..n` into (train, holdout) index lists.
pub fn holdout_split(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let holdout = libm::round(n as f64 * holdout_fraction) as usize;
    let holdout = holdout.min(n.saturating_sub(1));
    let train = idx.split_off(holdout);
    (train, idx)
}

/// A random permutation of `labels`, for null-model controls.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// One epoch of shuffled minibatches over `indices`.
pub(crate) fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub(crate) fn cosine_rate(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    let t = if total <= 1 { 1.0 } else { step as f64 / (total - 1) as f64 };
    let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    base * (floor + (1.0 - floor) * c)
}

/// Uniform initialisation in `±sqrt(6 / fan_in) * gain`.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * libm::sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub(crate) fn one_hot(classes: &[usize], count: usize) -> Tensor {
    Tensor::from_fn(&[classes.len(), count], |i| {
        if classes[i / count] == i % count {
            1.0
        } else {
            0.0
        }
    })
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[t.shape().len() - 1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
