//! The end-to-end run: data, generator, scorer, one direction per
//! attribute, evaluation, and the files each stage leaves behind.

use std::path::{Path, PathBuf};

use semsteer_core::evaluation::{evaluate_direction, evaluation_seeds, render_strip, EvalSeed, SteerReport};
use semsteer_core::models::{
    pretrain_scorer_backbone, retrain_scorer_head, shuffled_labels, train_generator, ClassLabel, Generator,
    GeneratorParams, LatentVector, ModelError, Scorer, ScorerParams, TrainedGenerator, TrainedScorer,
};
use semsteer_core::shapeworld::{sample_pooled_dataset, AttributeId, LabeledImage, ShapeworldError};
use semsteer_core::steering::{train_direction, SteeringDirection, SteeringError, TrainedDirection};
use semsteer_core::{ContentDigest, GrayImage};
use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Data(#[from] ShapeworldError),
    #[error("direction was trained against {what} {expected}, but {actual} was supplied")]
    Incompatible {
        what: &'static str,
        expected: String,
        actual: String,
    },
}

pub fn dataset(cfg: &RunConfig) -> Result<Vec<LabeledImage>, PipelineError> {
    Ok(sample_pooled_dataset(cfg.data.count_per_attribute, cfg.data.seed, cfg.data.image_size)?)
}

/// Images paired with their shape class, the generator and backbone label.
pub fn shape_pairs(data: &[LabeledImage]) -> Vec<(&GrayImage, usize)> {
    data.iter().map(|l| (&l.pixels, l.spec.shape_class.index())).collect()
}

/// Images paired with their attribute, the head label.
pub fn attribute_pairs(data: &[LabeledImage]) -> Vec<(&GrayImage, usize)> {
    data.iter().map(|l| (&l.pixels, l.attribute.index())).collect()
}

pub fn train_generator_stage(cfg: &RunConfig, data: &[LabeledImage]) -> Result<TrainedGenerator, PipelineError> {
    Ok(train_generator(&shape_pairs(data), cfg.generator, &cfg.generator_training)?)
}

pub fn generator_checkpoint(cfg: &RunConfig, trained: &TrainedGenerator) -> Checkpoint {
    Checkpoint::from_generator(
        &trained.generator,
        cfg.to_json(),
        cfg.generator_training.seed,
        json!({ "final_mse": trained.final_mse }),
    )
}

/// Backbone pretraining on shape classes followed by head retraining on
/// attributes.
#[derive(Debug, Clone)]
pub struct ScorerStage {
    pub backbone: TrainedScorer,
    pub head: TrainedScorer,
}

impl ScorerStage {
    pub fn params(&self) -> &ScorerParams {
        &self.head.params
    }

    /// Whether head retraining left the backbone bit-identical.
    pub fn backbone_unchanged(&self) -> bool {
        self.backbone.params.backbone_digest() == self.head.params.backbone_digest()
    }
}

pub fn train_scorer_stage(cfg: &RunConfig, data: &[LabeledImage]) -> Result<ScorerStage, PipelineError> {
    let backbone = pretrain_scorer_backbone(&shape_pairs(data), cfg.scorer, &cfg.backbone_training)?;
    let head = retrain_scorer_head(&backbone.params, &attribute_pairs(data), &cfg.head_training)?;
    Ok(ScorerStage { backbone, head })
}

/// Holdout accuracy of backbone pretraining on permuted shape labels.
pub fn shuffled_label_control(cfg: &RunConfig, data: &[LabeledImage]) -> Result<f64, PipelineError> {
    let pairs = shape_pairs(data);
    let labels: Vec<usize> = pairs.iter().map(|(_, y)| *y).collect();
    let permuted = shuffled_labels(&labels, cfg.backbone_training.seed ^ 0x5eed);
    let shuffled: Vec<(&GrayImage, usize)> = pairs.iter().zip(permuted).map(|((img, _), y)| (*img, y)).collect();
    Ok(pretrain_scorer_backbone(&shuffled, cfg.scorer, &cfg.backbone_training)?.holdout_accuracy)
}

pub fn scorer_checkpoint(cfg: &RunConfig, stage: &ScorerStage) -> Checkpoint {
    Checkpoint::from_scorer(
        stage.params(),
        cfg.to_json(),
        cfg.backbone_training.seed,
        json!({
            "backbone_holdout_accuracy": stage.backbone.holdout_accuracy,
            "head_holdout_accuracy": stage.head.holdout_accuracy,
            "backbone_digest": stage.head.params.backbone_digest(),
        }),
    )
}

/// Rejects a direction whose recorded provenance differs from the models
/// it is about to be used with.
pub fn check_compatible(
    dir: &SteeringDirection,
    generator: &ContentDigest,
    scorer: Option<&ContentDigest>,
) -> Result<(), PipelineError> {
    if dir.generator_digest != *generator {
        return Err(PipelineError::Incompatible {
            what: "generator",
            expected: dir.generator_digest.to_hex(),
            actual: generator.to_hex(),
        });
    }
    if let Some(s) = scorer.filter(|s| **s != dir.scorer_digest) {
        return Err(PipelineError::Incompatible {
            what: "scorer",
            expected: dir.scorer_digest.to_hex(),
            actual: s.to_hex(),
        });
    }
    Ok(())
}

pub fn train_direction_stage(
    cfg: &RunConfig,
    g: &GeneratorParams,
    s: &ScorerParams,
    attribute: AttributeId,
) -> Result<TrainedDirection, PipelineError> {
    Ok(train_direction(g, s, attribute, &cfg.steering)?)
}

pub fn direction_checkpoint(cfg: &RunConfig, dir: &SteeringDirection) -> Checkpoint {
    Checkpoint::from_direction(dir, cfg.to_json(), cfg.steering.seed)
}

pub fn eval_seeds(cfg: &RunConfig, g: &GeneratorParams, count: usize) -> Result<Vec<EvalSeed>, PipelineError> {
    Ok(evaluation_seeds(g, count, cfg.evaluation.seed, cfg.evaluation.truncation)?)
}

pub fn evaluate_stage(
    cfg: &RunConfig,
    g: &GeneratorParams,
    s: &ScorerParams,
    dir: &SteeringDirection,
    seeds: &[EvalSeed],
) -> Result<SteerReport, PipelineError> {
    check_compatible(dir, &g.digest(), Some(&s.digest()))?;
    Ok(evaluate_direction(g, s, dir, seeds, &cfg.grid()?)?)
}

/// The latent an explorer seed or a CLI `--seed` refers to.
pub fn seed_latent(g: &GeneratorParams, seed: u64, truncation: f64) -> Result<LatentVector, PipelineError> {
    Ok(g.sample_latent(1, truncation, seed)?.remove(0))
}

pub fn strip_png(
    g: &GeneratorParams,
    dir: &SteeringDirection,
    z: &LatentVector,
    class: ClassLabel,
    alphas: &[f64],
) -> Result<Vec<u8>, PipelineError> {
    Ok(io::encode_png(&render_strip(g, dir, z, class, alphas)?))
}

pub fn report_json(report: &SteerReport) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
    v.push(b'\n');
    v
}

/// Headline numbers of a full run.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub generator_mse: f64,
    pub backbone_holdout: f64,
    pub head_holdout: f64,
    pub backbone_unchanged: bool,
    pub reports: Vec<SteerReport>,
    /// Every artifact name, in write order.
    pub files: Vec<PathBuf>,
}

/// Runs every stage with `cfg`, handing each artifact to `sink` as
/// `(file name, bytes)` and one line per finished stage to `log`.
pub fn run_stages(
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&str, &[u8]) -> Result<(), PipelineError>,
    log: &mut dyn FnMut(&str),
) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        sink(name, bytes)?;
        files.push(PathBuf::from(name));
        Ok(())
    };
    let mut config_text = serde_json::to_vec_pretty(&cfg.to_json()).expect("config serializes");
    config_text.push(b'\n');
    put("config.json", &config_text)?;

    let data = dataset(cfg)?;
    log(&format!("dataset: {} images", data.len()));

    let gen = train_generator_stage(cfg, &data)?;
    put("generator.smst", &generator_checkpoint(cfg, &gen).to_bytes())?;
    put("generator_loss.csv", &io::loss_curve_csv(&gen.loss_curve)?)?;
    log(&format!("generator: reconstruction mse {:.5}", gen.final_mse));

    let scorer = train_scorer_stage(cfg, &data)?;
    put("scorer.smst", &scorer_checkpoint(cfg, &scorer).to_bytes())?;
    put("backbone_loss.csv", &io::loss_curve_csv(&scorer.backbone.loss_curve)?)?;
    put("head_loss.csv", &io::loss_curve_csv(&scorer.head.loss_curve)?)?;
    log(&format!(
        "scorer: backbone holdout {:.3}, head holdout {:.3}",
        scorer.backbone.holdout_accuracy, scorer.head.holdout_accuracy
    ));

    let g = &gen.generator;
    let s = scorer.params();
    let seeds = eval_seeds(cfg, g, cfg.evaluation.seeds)?;
    let mut reports = Vec::with_capacity(4);
    for a in AttributeId::ALL {
        let trained = train_direction_stage(cfg, g, s, a)?;
        let dir = &trained.direction;
        put(&format!("direction_{a}.smst"), &direction_checkpoint(cfg, dir).to_bytes())?;
        put(&format!("direction_{a}_loss.csv"), &io::loss_curve_csv(&trained.loss_curve)?)?;
        let report = evaluate_stage(cfg, g, s, dir, &seeds)?;
        put(&format!("report_{a}.json"), &report_json(&report))?;
        put(&format!("curves_{a}.csv"), &io::score_curves_csv(&report.grid, &report.curves)?)?;
        for (i, seed) in seeds.iter().take(cfg.evaluation.strip_count).enumerate() {
            let png = strip_png(g, dir, &seed.z, seed.class, &cfg.evaluation.strip_alphas)?;
            put(&format!("strip_{a}_{i}.png"), &png)?;
        }
        log(&format!(
            "{a}: loss {:.4}, monotonicity {:.3}, score gap {:.3}",
            dir.final_loss, report.monotonicity_rate, report.score_gap
        ));
        reports.push(report);
    }
    Ok(PipelineSummary {
        generator_mse: gen.final_mse,
        backbone_holdout: scorer.backbone.holdout_accuracy,
        head_holdout: scorer.head.holdout_accuracy,
        backbone_unchanged: scorer.backbone_unchanged(),
        reports,
        files,
    })
}

/// [`run_stages`] writing artifacts under `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<PipelineSummary, PipelineError> {
    let dir: &Path = &cfg.out_dir;
    let mut sink = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> { Ok(io::write_file(&dir.join(name), bytes)?) };
    run_stages(cfg, &mut sink, &mut log)
}
