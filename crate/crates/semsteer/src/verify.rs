//! Self-checks behind the `verify` command: gradient fidelity, the
//! analytic zero-direction loss, the linear oracle and a determinism replay.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsteer_core::diagnostics::{check_generator_passes, check_random_primitives, check_scorer_passes, max_error};
use semsteer_core::models::{LinearGenerator, LinearScorer};
use semsteer_core::shapeworld::AttributeId;
use semsteer_core::steering::{
    linear_oracle_config, oracle_check, steering_loss, train_direction, SteeringBatch, DEFAULT_ALPHA_RANGE,
};
use semsteer_core::Tensor;

use crate::config::RunConfig;
use crate::pipeline::{run_stages, PipelineError};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const BASELINE_TOLERANCE: f64 = 1e-3;
pub const BASELINE_SAMPLES: usize = 100_000;
pub const ORACLE_PAIRS: usize = 10;
pub const ORACLE_LOSS: f64 = 1e-6;
pub const ORACLE_GAIN_TOLERANCE: f64 = 1e-3;
pub const ORACLE_COSINE: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, check: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = check();
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Largest finite-difference relative error over 100 primitive instances
/// and 20 passes each through a generator and a scorer.
pub fn gradient_error() -> Result<f64, String> {
    let prim = check_random_primitives(100, 1).map_err(|e| e.to_string())?;
    let gen = check_generator_passes(20, 2).map_err(|e| e.to_string())?;
    let sc = check_scorer_passes(20, 3).map_err(|e| e.to_string())?;
    Ok(max_error(&prim).max(max_error(&gen)).max(max_error(&sc)))
}

pub fn check_gradients() -> CheckResult {
    timed("gradients", || match gradient_error() {
        Ok(e) => (e < GRAD_TOLERANCE, format!("max relative error {e:.3e} (< {GRAD_TOLERANCE:e})")),
        Err(e) => (false, e),
    })
}

/// A linear generator `d → p` and a linear scorer with random weights.
pub fn random_linear_pair(d: usize, p: usize, seed: u64) -> (LinearGenerator, LinearScorer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale_w = 1.0 / (d as f64).sqrt();
    let w = Tensor::from_fn(&[d, p], |_| rng.random_range(-1.0..1.0) * scale_w);
    let b = Tensor::from_fn(&[p], |_| rng.random_range(-0.1..0.1));
    let scale_s = 1.0 / (p as f64).sqrt();
    let sw: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0) * scale_s).collect();
    (LinearGenerator::new(w, b).expect("consistent shapes"), LinearScorer::new(&sw, 0.2))
}

/// Steering loss of θ = 0 without clamping, averaged over `samples` draws
/// of `(z, α)`. Its expectation is the second moment of α.
pub fn zero_direction_loss(samples: usize, seed: u64) -> Result<f64, String> {
    let (g, s) = random_linear_pair(16, 64, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Tensor::zeros(&[1, 16]);
    let chunk = 10_000;
    let mut total = 0.0;
    let mut left = samples;
    while left > 0 {
        let n = left.min(chunk);
        let batch = SteeringBatch::sample(&g, n, DEFAULT_ALPHA_RANGE, 2.0, &mut rng).map_err(|e| e.to_string())?;
        total += steering_loss(&theta, &batch, &g, &s, AttributeId::Dense, false).map_err(|e| e.to_string())? * n as f64;
        left -= n;
    }
    Ok(total / samples as f64)
}

pub fn check_baseline() -> CheckResult {
    timed("zero-direction loss", || {
        let a = DEFAULT_ALPHA_RANGE;
        let expected = a * a / 3.0;
        match zero_direction_loss(BASELINE_SAMPLES, 11) {
            Ok(l) => (
                (l - expected).abs() < BASELINE_TOLERANCE,
                format!("{l:.6} over {BASELINE_SAMPLES} samples, expected {expected:.6}"),
            ),
            Err(e) => (false, e),
        }
    })
}

/// Minimum-norm solution of `(Ww)ᵀθ = 1` from an SVD pseudoinverse.
pub fn pseudoinverse_solution(g: &LinearGenerator, s: &LinearScorer) -> Vec<f64> {
    let (d, p) = (g.weight().shape()[0], g.output_dim());
    let w = nalgebra::DMatrix::from_row_slice(d, p, g.weight().data());
    let sw = nalgebra::DVector::from_column_slice(s.weight().data());
    let row = (w * sw).transpose();
    let pinv = row.pseudo_inverse(1e-12).expect("nonnegative epsilon");
    (pinv * nalgebra::DVector::from_element(1, 1.0)).iter().copied().collect()
}

/// Outcome of training on one linear pair.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub loss: f64,
    pub gain: f64,
    pub cosine: f64,
    /// Distance to the pseudoinverse solution relative to its norm.
    pub relative_distance: f64,
}

impl OracleOutcome {
    pub fn passes(&self) -> bool {
        self.loss < ORACLE_LOSS
            && (self.gain - 1.0).abs() <= ORACLE_GAIN_TOLERANCE
            && self.cosine > ORACLE_COSINE
            && self.relative_distance <= ORACLE_GAIN_TOLERANCE
    }
}

pub fn linear_oracle(pair_seed: u64) -> Result<OracleOutcome, String> {
    let (g, s) = random_linear_pair(16, 64, pair_seed);
    let cfg = linear_oracle_config(&g, &s, pair_seed);
    let trained = train_direction(&g, &s, AttributeId::Dense, &cfg).map_err(|e| e.to_string())?;
    let theta = trained.direction.theta.data();
    let report = oracle_check(&g, &s, theta).map_err(|e| e.to_string())?;
    let oracle = pseudoinverse_solution(&g, &s);
    let dist = theta.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm = oracle.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(OracleOutcome {
        loss: trained.direction.final_loss,
        gain: report.gain,
        cosine: report.cosine,
        relative_distance: dist / norm,
    })
}

pub fn check_linear_oracle() -> CheckResult {
    timed("linear oracle", || {
        let mut worst = (0.0f64, 0.0f64, 1.0f64, 0.0f64);
        let mut failed = Vec::new();
        for k in 0..ORACLE_PAIRS as u64 {
            match linear_oracle(100 + k) {
                Ok(o) => {
                    if !o.passes() {
                        failed.push(k);
                    }
                    worst.0 = worst.0.max(o.loss);
                    worst.1 = worst.1.max((o.gain - 1.0).abs());
                    worst.2 = worst.2.min(o.cosine);
                    worst.3 = worst.3.max(o.relative_distance);
                }
                Err(e) => return (false, format!("pair {k}: {e}")),
            }
        }
        (
            failed.is_empty(),
            format!(
                "{ORACLE_PAIRS} pairs, worst loss {:.2e}, |gain-1| {:.2e}, cosine {:.6}, distance to pseudoinverse {:.2e}{}",
                worst.0,
                worst.1,
                worst.2,
                worst.3,
                if failed.is_empty() { String::new() } else { format!(", failed pairs {failed:?}") }
            ),
        )
    })
}

/// Every artifact of a run with `cfg`, keyed by file name.
pub fn artifacts(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<u8>>, PipelineError> {
    let mut out = BTreeMap::new();
    let mut sink = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        out.insert(name.to_string(), bytes.to_vec());
        Ok(())
    };
    run_stages(cfg, &mut sink, &mut |_| {})?;
    Ok(out)
}

/// Names of artifacts that differ between two runs, including ones that
/// only one run produced.
pub fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| a.get(*n) != b.get(*n)).cloned().collect()
}

pub fn check_determinism(cfg: &RunConfig) -> CheckResult {
    timed("determinism replay", || match (artifacts(cfg), artifacts(cfg)) {
        (Ok(a), Ok(b)) => {
            let diff = differing(&a, &b);
            if diff.is_empty() {
                (true, format!("{} artifacts byte-identical across two runs", a.len()))
            } else {
                (false, format!("differing artifacts: {}", diff.join(", ")))
            }
        }
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    })
}

/// Runs every check, reporting each through `report` as it finishes.
pub fn run_all(mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: [&dyn Fn() -> CheckResult; 4] = [
        &check_gradients,
        &check_baseline,
        &check_linear_oracle,
        &|| check_determinism(&RunConfig::smoke()),
    ];
    checks
        .iter()
        .map(|c| {
            let r = c();
            report(&r);
            r
        })
        .collect()
}
