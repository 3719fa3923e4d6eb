use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use trafficlm::detect::{FinetuneConfig, WindowConfig};
use trafficlm::model::ModelConfig;
use trafficlm::schema::SchemaVariant;
use trafficlm::synth::{AttackGroup, SynthConfig};
use trafficlm::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Defaults to `<workdir>/flows.csv`.
    pub flows: Option<PathBuf>,
    /// Defaults to `<workdir>/registry.csv`.
    pub registry: Option<PathBuf>,
    /// Defaults to `<workdir>/labels.csv`.
    pub labels: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            flows: None,
            registry: None,
            labels: None,
            workdir: PathBuf::from("work"),
        }
    }
}

impl Paths {
    pub fn flows(&self) -> PathBuf {
        self.flows.clone().unwrap_or_else(|| self.workdir.join("flows.csv"))
    }

    pub fn registry(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.workdir.join("registry.csv"))
    }

    pub fn labels(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.workdir.join("labels.csv"))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

/// Absolute epoch-minute range to ingest; the flow file's own range when absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanConfig {
    pub start_minute: u64,
    pub minutes: u64,
}

/// Fractions of the ingested span; the test split takes the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: f64,
    pub val: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

impl Splits {
    /// Minute boundaries `[0, train_end, val_end, minutes]`.
    pub fn bounds(&self, minutes: u64) -> Result<[u64; 4]> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.train) || !ok(self.val) || self.train + self.val >= 1.0 {
            return Err(CliError::Validation(
                "splits.train and splits.val must be positive and sum below 1".into(),
            ));
        }
        let train_end = (minutes as f64 * self.train).round() as u64;
        let val_end = (minutes as f64 * (self.train + self.val)).round() as u64;
        if train_end == 0 || val_end <= train_end || val_end >= minutes {
            return Err(CliError::Validation(format!("{minutes} minutes cannot be split {self:?}")));
        }
        Ok([0, train_end, val_end, minutes])
    }
}

/// Decoder shape; vocabulary sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl ModelShape {
    pub fn config(&self, n_features: usize, n_bins: usize, n_nodes: usize, n_customers: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            n_features,
            n_bins,
            n_nodes,
            n_customers,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub window: WindowConfig,
    pub finetune: FinetuneConfig,
    /// Overhead cap O in percent.
    pub overhead_cap: f64,
    /// Customer fraction B in percent.
    pub customer_pct: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            finetune: FinetuneConfig {
                epochs: 60,
                ..FinetuneConfig::default()
            },
            overhead_cap: 0.1,
            customer_pct: 80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Copied into every stage's seed before `--set` overrides apply.
    pub seed: u64,
    pub paths: Paths,
    pub schema: SchemaVariant,
    pub n_bins: usize,
    pub span: Option<SpanConfig>,
    pub splits: Splits,
    pub synth: SynthConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

impl Default for PipelineConfig {
    /// A demo run that finishes in seconds.
    fn default() -> Self {
        let minutes = 2880;
        Self {
            seed: 0,
            paths: Paths::default(),
            schema: SchemaVariant::Full,
            n_bins: 10,
            span: None,
            splits: Splits::default(),
            synth: SynthConfig {
                nodes: 6,
                customers: 2,
                minutes,
                attack_groups: vec![
                    AttackGroup { count: 4, start_minute: 1828, end_minute: 2264 },
                    AttackGroup { count: 4, start_minute: 2404, end_minute: 2840 },
                ],
                ..SynthConfig::default()
            },
            model: ModelShape::default(),
            train: TrainConfig {
                max_epochs: 2,
                unit_len: 128,
                ..TrainConfig::default()
            },
            detect: DetectConfig::default(),
        }
    }
}

/// Command-line adjustments, applied in order: file, `--seed`, seed propagation, `--workdir`, `--set`.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
    pub set: Vec<String>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.detect.window.seed = cfg.seed;
        cfg.detect.finetune.seed = cfg.seed;
        if let Some(w) = &overrides.workdir {
            cfg.paths.workdir = w.clone();
        }
        if overrides.set.is_empty() {
            return Ok(cfg);
        }
        let mut value = serde_json::to_value(&cfg).expect("config serializes");
        for assignment in &overrides.set {
            apply_set(&mut value, assignment)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--set: {e}")))
    }
}

/// Sets a leaf addressed by a dotted path. The value is parsed as JSON, or taken as a string.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("--set: unknown config key {path:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// First 16 hex digits of the sha256 of the JSON encoding of `parts`.
pub fn digest(parts: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(parts).expect("digest input serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Per-stage config digests. Each digest covers its own settings and the stage before it.
pub struct Digests {
    pub ingest: String,
    pub discretize: String,
    pub pretrain: String,
    pub finetune: String,
}

impl Digests {
    pub fn of(cfg: &PipelineConfig) -> Self {
        let ingest = digest(&("ingest", cfg.schema, cfg.span, cfg.splits));
        let discretize = digest(&(&ingest, cfg.n_bins));
        let pretrain = digest(&(&discretize, &cfg.model, &cfg.train));
        let finetune = digest(&(&pretrain, &cfg.detect));
        Self {
            ingest,
            discretize,
            pretrain,
            finetune,
        }
    }
}
