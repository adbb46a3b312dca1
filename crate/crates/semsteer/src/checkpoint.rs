//! Single-file parameter container.
//!
//! Layout: the magic bytes `SMST`, a little-endian `u32` format version, a
//! little-endian `u32` length followed by that many bytes of UTF-8 JSON
//! metadata, then the raw little-endian `f64` payload of every tensor in
//! metadata order. The metadata digest is SHA-256 over the payload bytes and
//! is checked on load.

use std::path::Path;

use semsteer_core::models::{GeneratorConfig, GeneratorParams, ModelError, ScorerConfig, ScorerParams};
use semsteer_core::shapeworld::AttributeId;
use semsteer_core::steering::SteeringDirection;
use semsteer_core::{ContentDigest, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"SMST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Generator,
    Scorer,
    Direction,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckpointKind::Generator => "generator",
            CheckpointKind::Scorer => "scorer",
            CheckpointKind::Direction => "direction",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated or has trailing bytes")]
    Truncated,
    #[error("checkpoint metadata is not valid: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("payload digest {actual} does not match recorded {expected}")]
    DigestMismatch { expected: String, actual: String },
    #[error("expected a {expected} checkpoint, found {actual}")]
    WrongKind {
        expected: CheckpointKind,
        actual: CheckpointKind,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The JSON block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Echo of the run configuration that produced the parameters.
    pub config: serde_json::Value,
    pub seed: u64,
    pub digest: ContentDigest,
    /// Kind-specific fields: model architecture, direction provenance,
    /// training statistics.
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorDetails {
    architecture: GeneratorConfig,
    #[serde(default)]
    stats: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScorerDetails {
    architecture: ScorerConfig,
    frozen_backbone: bool,
    #[serde(default)]
    stats: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DirectionDetails {
    attribute: AttributeId,
    training_range: f64,
    final_loss: f64,
    generator_digest: ContentDigest,
    scorer_digest: ContentDigest,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        named: Vec<(String, Tensor)>,
        config: serde_json::Value,
        seed: u64,
        details: serde_json::Value,
    ) -> Self {
        let (entries, tensors): (Vec<_>, Vec<_>) = named
            .into_iter()
            .map(|(name, t)| {
                (
                    TensorEntry {
                        name,
                        shape: t.shape().to_vec(),
                    },
                    t,
                )
            })
            .unzip();
        let digest = ContentDigest::of_tensors(&tensors);
        Self {
            meta: Metadata {
                kind,
                version: FORMAT_VERSION,
                tensors: entries,
                config,
                seed,
                digest,
                details,
            },
            tensors,
        }
    }

    pub fn digest(&self) -> ContentDigest {
        self.meta.digest
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let payload_len: usize = self.tensors.iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            t.append_le_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |at: usize| -> Result<u32, CheckpointError> {
            let b = bytes.get(at..at + 4).ok_or(CheckpointError::Truncated)?;
            Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
        };
        let version = word(4)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let json_len = word(8)? as usize;
        let json = bytes.get(12..12 + json_len).ok_or(CheckpointError::Truncated)?;
        let meta: Metadata = serde_json::from_slice(json)?;
        if meta.version != version {
            return Err(CheckpointError::UnsupportedVersion(meta.version));
        }
        let payload = &bytes[12 + json_len..];
        let expected_len: usize = meta.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected_len {
            return Err(CheckpointError::Truncated);
        }
        let actual = ContentDigest::of_bytes(payload);
        if actual != meta.digest {
            return Err(CheckpointError::DigestMismatch {
                expected: meta.digest.to_hex(),
                actual: actual.to_hex(),
            });
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut at = 0;
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[at..at + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            at += n * 8;
            tensors.push(Tensor::from_vec(e.shape.clone(), data).expect("shape product matches"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<(), CheckpointError> {
        if self.meta.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                actual: self.meta.kind,
            });
        }
        Ok(())
    }

    fn named(&self) -> Vec<(&str, Tensor)> {
        self.meta
            .tensors
            .iter()
            .zip(&self.tensors)
            .map(|(e, t)| (e.name.as_str(), t.clone()))
            .collect()
    }

    pub fn from_generator(g: &GeneratorParams, config: serde_json::Value, seed: u64, stats: serde_json::Value) -> Self {
        let named = g.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let details = GeneratorDetails {
            architecture: *g.config(),
            stats,
        };
        Self::new(
            CheckpointKind::Generator,
            named,
            config,
            seed,
            serde_json::to_value(details).expect("details serialize"),
        )
    }

    pub fn to_generator(&self) -> Result<GeneratorParams, CheckpointError> {
        self.expect_kind(CheckpointKind::Generator)?;
        let d: GeneratorDetails = serde_json::from_value(self.meta.details.clone())?;
        Ok(GeneratorParams::from_named_tensors(d.architecture, &self.named())?)
    }

    pub fn from_scorer(s: &ScorerParams, config: serde_json::Value, seed: u64, stats: serde_json::Value) -> Self {
        let named = s.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let details = ScorerDetails {
            architecture: *s.config(),
            frozen_backbone: s.is_backbone_frozen(),
            stats,
        };
        Self::new(
            CheckpointKind::Scorer,
            named,
            config,
            seed,
            serde_json::to_value(details).expect("details serialize"),
        )
    }

    pub fn to_scorer(&self) -> Result<ScorerParams, CheckpointError> {
        self.expect_kind(CheckpointKind::Scorer)?;
        let d: ScorerDetails = serde_json::from_value(self.meta.details.clone())?;
        Ok(ScorerParams::from_named_tensors(d.architecture, &self.named(), d.frozen_backbone)?)
    }

    pub fn from_direction(dir: &SteeringDirection, config: serde_json::Value, seed: u64) -> Self {
        let details = DirectionDetails {
            attribute: dir.attribute,
            training_range: dir.training_range,
            final_loss: dir.final_loss,
            generator_digest: dir.generator_digest,
            scorer_digest: dir.scorer_digest,
        };
        Self::new(
            CheckpointKind::Direction,
            vec![("theta".to_string(), dir.theta.clone())],
            config,
            seed,
            serde_json::to_value(details).expect("details serialize"),
        )
    }

    pub fn to_direction(&self) -> Result<SteeringDirection, CheckpointError> {
        self.expect_kind(CheckpointKind::Direction)?;
        let d: DirectionDetails = serde_json::from_value(self.meta.details.clone())?;
        let theta = self
            .meta
            .tensors
            .iter()
            .position(|e| e.name == "theta")
            .map(|i| self.tensors[i].clone())
            .filter(|t| t.shape().len() == 2 && t.is_finite())
            .ok_or_else(|| ModelError::BadTensor("theta".into()))?;
        Ok(SteeringDirection {
            attribute: d.attribute,
            theta,
            training_range: d.training_range,
            final_loss: d.final_loss,
            generator_digest: d.generator_digest,
            scorer_digest: d.scorer_digest,
        })
    }
}
