//! Randomized gradient checks over primitives and full model passes.
//!
//! The numeric side is always a central difference of forward values, so it
//! shares no code with the backward kernels it checks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AutodiffError, Primitive, Tape, Var};
use crate::models::{GeneratorConfig, GeneratorParams, ModelError, ScorerConfig, ScorerParams};
use crate::shapeworld::AttributeId;
use crate::tensor::Tensor;

/// Finite-difference step used by every check in this module.
pub const FD_STEP: f64 = 1e-5;

/// One checked instance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub label: &'static str,
    pub input: usize,
    pub max_relative_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[-1,-0.05] ∪ [0.05,1]`, keeping relu kinks away from probes.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Number of distinct primitive kinds produced by [`primitive_instance`].
pub const PRIMITIVE_KINDS: usize = 16;

/// A random, small instance of primitive kind `kind % PRIMITIVE_KINDS`.
pub fn primitive_instance(kind: usize, rng: &mut ChaCha8Rng) -> (&'static str, Primitive, Vec<Tensor>) {
    let n = rng.random_range(1..=3);
    match kind % PRIMITIVE_KINDS {
        0 => {
            let (k, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
            (
                "matmul",
                Primitive::MatMul,
                vec![uniform(rng, &[n, k], -1.0, 1.0), uniform(rng, &[k, m], -1.0, 1.0)],
            )
        }
        kind @ (1 | 2) => {
            let stride = kind;
            let (c, o) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let h = rng.random_range(3..=5);
            let w = rng.random_range(3..=5);
            (
                if stride == 1 { "conv2d/1" } else { "conv2d/2" },
                Primitive::Conv2d { stride },
                vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, 3, 3], -1.0, 1.0)],
            )
        }
        3 => (
            "upsample2x",
            Primitive::Upsample2x,
            vec![uniform(rng, &[n, 2, 2, 3], -1.0, 1.0)],
        ),
        4 => {
            let c = rng.random_range(1..=3);
            (
                "bias_add",
                Primitive::BiasAdd,
                vec![uniform(rng, &[n, c, 2, 2], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)],
            )
        }
        5 => (
            "add",
            Primitive::Add,
            vec![uniform(rng, &[n, 3], -1.0, 1.0), uniform(rng, &[n, 3], -1.0, 1.0)],
        ),
        6 => (
            "mul",
            Primitive::Mul,
            vec![uniform(rng, &[n, 3], -1.0, 1.0), uniform(rng, &[n, 3], -1.0, 1.0)],
        ),
        7 => {
            let s = rng.random_range(-2.0..2.0);
            ("scale", Primitive::Scale(s), vec![uniform(rng, &[n, 4], -1.0, 1.0)])
        }
        8 => ("relu", Primitive::Relu, vec![away_from_zero(rng, &[n, 5])]),
        9 => ("sigmoid", Primitive::Sigmoid, vec![uniform(rng, &[n, 4], -3.0, 3.0)]),
        10 => ("tanh", Primitive::Tanh, vec![uniform(rng, &[n, 4], -2.0, 2.0)]),
        11 => ("softmax", Primitive::Softmax, vec![uniform(rng, &[n, 4], -2.0, 2.0)]),
        12 => (
            "mse",
            Primitive::Mse,
            vec![uniform(rng, &[n, 3], -1.0, 1.0), uniform(rng, &[n, 3], -1.0, 1.0)],
        ),
        13 => {
            let k = rng.random_range(2..=5);
            let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            (
                "softmax_cross_entropy",
                Primitive::SoftmaxCrossEntropy { labels },
                vec![uniform(rng, &[n, k], -2.0, 2.0)],
            )
        }
        14 => (
            "reshape",
            Primitive::Reshape { shape: vec![n * 6] },
            vec![uniform(rng, &[n, 2, 3], -1.0, 1.0)],
        ),
        _ => (
            "spatial_mean",
            Primitive::SpatialMean,
            vec![uniform(rng, &[n, 2, 3, 3], -1.0, 1.0)],
        ),
    }
}

/// Reduces any output to a scalar through a fixed random projection.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, AutodiffError> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone());
    tape.matmul(flat, w)
}

/// Grad-checks every input of one primitive instance.
pub fn check_primitive(
    label: &'static str,
    primitive: &Primitive,
    inputs: &[Tensor],
    projection_seed: u64,
) -> Result<Vec<CheckOutcome>, AutodiffError> {
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.apply(primitive.clone(), &vars)?;
        tape.value(out).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
    let weights = uniform(&mut rng, &[out_len, 1], -1.0, 1.0);
    let mut outcomes = Vec::new();
    for which in 0..inputs.len() {
        let report = grad_check(
            |tape: &mut Tape, x: Var| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { tape.constant(t.clone()) })
                    .collect();
                let out = tape.apply(primitive.clone(), &vars)?;
                project(tape, out, &weights)
            },
            &inputs[which],
            FD_STEP,
        )?;
        outcomes.push(CheckOutcome {
            label,
            input: which,
            max_relative_error: report.max_relative_error,
        });
    }
    Ok(outcomes)
}

/// Grad-checks `count` random primitive instances, cycling through kinds.
pub fn check_random_primitives(count: usize, seed: u64) -> Result<Vec<CheckOutcome>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for i in 0..count {
        let (label, primitive, inputs) = primitive_instance(i, &mut rng);
        let projection_seed = rng.random();
        outcomes.extend(check_primitive(label, &primitive, &inputs, projection_seed)?);
    }
    Ok(outcomes)
}

/// Small models used for full-pass gradient checks.
fn check_models(rng: &mut ChaCha8Rng) -> (GeneratorParams, ScorerParams) {
    let gcfg = GeneratorConfig {
        image_size: 8,
        z_dim: 4,
        embed_dim: 3,
        base_channels: 3,
        mid_channels: 2,
        class_count: 4,
    };
    let scfg = ScorerConfig {
        image_size: 8,
        channels1: 3,
        channels2: 4,
        outputs: 4,
    };
    let g = GeneratorParams::init(gcfg, rng.random()).expect("valid config");
    let mut s = ScorerParams::init(scfg, rng.random()).expect("valid config");
    // Non-zero head so scorer gradients are not trivially zero.
    let head = uniform(rng, s.head_weight().shape(), -1.0, 1.0);
    *s.head_weight_mut() = head;
    (g, s)
}

/// Full generator passes: projected output image vs latent `z`.
pub fn check_generator_passes(count: usize, seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for _ in 0..count {
        let (g, _) = check_models(&mut rng);
        let z = uniform(&mut rng, &[1, g.config().z_dim], -1.5, 1.5);
        let class = rng.random_range(0..g.config().class_count);
        let pixels = g.config().image_size * g.config().image_size;
        let weights = uniform(&mut rng, &[pixels, 1], -1.0, 1.0);
        let report = grad_check(
            |tape: &mut Tape, z: Var| -> Result<Var, ModelError> {
                let bound = g.bind(tape, false);
                let img = g.decode(tape, &bound, z, &[class])?;
                Ok(project(tape, img, &weights)?)
            },
            &z,
            FD_STEP,
        )?;
        outcomes.push(CheckOutcome {
            label: "generator_forward",
            input: 0,
            max_relative_error: report.max_relative_error,
        });
    }
    Ok(outcomes)
}

/// Full scorer passes: one attribute probability vs input pixels.
pub fn check_scorer_passes(count: usize, seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for _ in 0..count {
        let (_, s) = check_models(&mut rng);
        let size = s.config().image_size;
        let image = uniform(&mut rng, &[1, 1, size, size], 0.0, 1.0);
        let attribute = AttributeId::ALL[rng.random_range(0..4)];
        let report = grad_check(
            |tape: &mut Tape, x: Var| -> Result<Var, ModelError> {
                let bound = s.bind(tape, false, false);
                let probs = s.probabilities(tape, &bound, x)?;
                let select = tape.constant(attribute.one_hot_column());
                let score = tape.matmul(probs, select)?;
                Ok(tape.reshape(score, &[])?)
            },
            &image,
            FD_STEP,
        )?;
        outcomes.push(CheckOutcome {
            label: "scorer_forward",
            input: 0,
            max_relative_error: report.max_relative_error,
        });
    }
    Ok(outcomes)
}

pub fn max_error(outcomes: &[CheckOutcome]) -> f64 {
    outcomes.iter().fold(0.0, |m, o| m.max(o.max_relative_error))
}
