//! Run configuration: one JSON document covering every stage, with
//! defaults for anything a file leaves out.

use std::path::{Path, PathBuf};

use semsteer_core::evaluation::{AlphaGrid, DEFAULT_SEEDS};
use semsteer_core::models::{ClassifierTraining, GeneratorConfig, GeneratorTraining, ScorerConfig};
use semsteer_core::steering::SteeringConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Images per attribute used by the pipeline unless configured otherwise.
pub const PIPELINE_COUNT: usize = 1600;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count_per_attribute: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count_per_attribute: PIPELINE_COUNT,
            image_size: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub seeds: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub truncation: f64,
    /// α values of the strips the pipeline writes.
    pub strip_alphas: Vec<f64>,
    /// Evaluation seeds rendered as strips by the pipeline.
    pub strip_count: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS,
            seed: 7,
            grid: AlphaGrid::default().values().to_vec(),
            truncation: 2.0,
            strip_alphas: AlphaGrid::default().values().to_vec(),
            strip_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub generator_training: GeneratorTraining,
    pub scorer: ScorerConfig,
    pub backbone_training: ClassifierTraining,
    pub head_training: ClassifierTraining,
    pub steering: SteeringConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            generator_training: GeneratorTraining::default(),
            scorer: ScorerConfig::default(),
            backbone_training: ClassifierTraining::default(),
            head_training: ClassifierTraining::head(),
            steering: SteeringConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Overlays `patch` on `base` key by key. Keys absent from `base` are
/// rejected so typos do not pass silently.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

impl RunConfig {
    /// A run small enough to finish in seconds: 16px images, a handful of
    /// epochs and steps. Useful for replay checks and tests, not for results.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.data = DataConfig {
            count_per_attribute: 24,
            image_size: 16,
            seed: 5,
        };
        cfg.generator = GeneratorConfig {
            image_size: 16,
            z_dim: 6,
            embed_dim: 3,
            base_channels: 4,
            mid_channels: 3,
            class_count: 4,
        };
        cfg.generator_training.epochs = 2;
        cfg.generator_training.batch_size = 16;
        cfg.generator_training.encoder_channels = [3, 4];
        cfg.scorer = ScorerConfig {
            image_size: 16,
            channels1: 3,
            channels2: 6,
            outputs: 4,
        };
        cfg.backbone_training.epochs = 2;
        cfg.head_training.epochs = 4;
        cfg.steering.steps = 5;
        cfg.steering.batch_size = 8;
        cfg.steering.eval_batch = 16;
        cfg.evaluation.seeds = 6;
        cfg.evaluation.strip_count = 2;
        cfg
    }

    /// Defaults overlaid with a JSON document.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, serde_json::from_str(text)?, "")?;
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `steering.steps` and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut base = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut patch = value;
            for part in key.rsplit('.') {
                let mut m = serde_json::Map::new();
                m.insert(part.to_string(), patch);
                patch = Value::Object(m);
            }
            merge(&mut base, patch, "")?;
        }
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<AlphaGrid, ConfigError> {
        AlphaGrid::new(self.evaluation.grid.clone()).map_err(|e| ConfigError::Invalid(format!("evaluation.grid: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.generator.validate().map_err(|e| ConfigError::Invalid(format!("generator: {e}")))?;
        self.scorer.validate().map_err(|e| ConfigError::Invalid(format!("scorer: {e}")))?;
        self.steering.validate().map_err(|e| ConfigError::Invalid(format!("steering: {e}")))?;
        if self.steering.steps == 0 {
            return invalid("steering.steps must be at least 1".into());
        }
        self.grid()?;
        if self.data.count_per_attribute == 0 {
            return invalid("data.count_per_attribute must be at least 1".into());
        }
        let size = self.data.image_size;
        if self.generator.image_size != size || self.scorer.image_size != size {
            return invalid(format!(
                "image sizes disagree: data {size}, generator {}, scorer {}",
                self.generator.image_size, self.scorer.image_size
            ));
        }
        if self.generator.class_count != 4 || self.scorer.outputs != 4 {
            return invalid("generator.class_count and scorer.outputs must be 4".into());
        }
        if self.evaluation.seeds == 0 || !(self.evaluation.truncation > 0.0) {
            return invalid("evaluation.seeds and evaluation.truncation must be positive".into());
        }
        if self.evaluation.strip_alphas.is_empty() || self.evaluation.strip_alphas.iter().any(|a| !a.is_finite()) {
            return invalid("evaluation.strip_alphas must be finite and nonempty".into());
        }
        for (name, t) in [("backbone_training", &self.backbone_training), ("head_training", &self.head_training)] {
            if t.epochs == 0 || t.batch_size == 0 || !(0.0..1.0).contains(&t.holdout_fraction) {
                return invalid(format!("{name}: epochs and batch_size must be positive, holdout_fraction in [0, 1)"));
            }
        }
        let g = &self.generator_training;
        if g.epochs == 0 || g.batch_size == 0 || !(g.learning_rate > 0.0) || !(g.latent_noise >= 0.0) {
            return invalid("generator_training: epochs, batch_size and learning_rate must be positive".into());
        }
        Ok(())
    }
}
