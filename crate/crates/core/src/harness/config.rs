//! Experiment configuration: TOML schema, presets and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::{Aggregation, Method, Selection};
use crate::similarity::LeftoverScope;
use crate::tensor::Real;

/// Version of the configuration schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    /// Final fraction of neuron groups kept.
    pub leftover: Real,
    /// Overrides the method's default selection rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Byte-level language modelling on a text file.
    Corpus,
    /// Synthetic digit sorting scored by exact match.
    Sort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: PathBuf,
    pub valid_fraction: Real,
    pub sort_digits: usize,
    pub sort_train: usize,
    pub sort_valid: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Corpus,
            path: PathBuf::from("data/corpus.txt"),
            valid_fraction: 0.1,
            sort_digits: 4,
            sort_train: 2000,
            sort_valid: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Caps the step count implied by `epochs` when positive.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub warmup_fraction: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
    pub eval_interval: usize,
    /// Validation blocks used per evaluation; 0 means all.
    pub eval_max_blocks: usize,
    /// Write a resumable state file every this many steps; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            max_steps: 0,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-4,
            eval_interval: 50,
            eval_max_blocks: 0,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub lambda_mvp: Real,
    pub lambda_gum: Real,
    /// Defaults to the method's own rate when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_lr: Option<Real>,
    pub threshold: Real,
    /// Plain `S ← S − η·g` updates instead of Adam.
    pub raw_score_sgd: bool,
    pub aggregation: Aggregation,
    pub similarity_retention: Real,
    pub leftover_scope: LeftoverScope,
    pub warmup_fraction: Real,
    pub ramp_end_fraction: Real,
    pub recompute_interval: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            lambda_mvp: 2.0,
            lambda_gum: 10.0,
            mask_lr: None,
            threshold: 0.5,
            raw_score_sgd: false,
            aggregation: Aggregation::Mean,
            similarity_retention: 0.99,
            leftover_scope: LeftoverScope::Global,
            warmup_fraction: 0.1,
            ramp_end_fraction: 0.8,
            recompute_interval: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub enabled: bool,
    pub threshold: Real,
    pub bins: usize,
    /// Training blocks measured; 0 means all.
    pub max_blocks: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            enabled: true,
            threshold: 0.8,
            bins: 10,
            max_blocks: 64,
        }
    }
}

impl ExperimentConfig {
    /// Named built-in configurations.
    pub fn preset(name: &str) -> Option<Self> {
        let base = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            method: Method::HardMovement,
            leftover: 0.5,
            selection: None,
            out_dir: None,
            init_checkpoint: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            pruning: PruningConfig::default(),
            distill: None,
            analysis: AnalysisConfig::default(),
        };
        match name {
            "demo" => Some(ExperimentConfig {
                model: ModelConfig {
                    d_model: 64,
                    n_layers: 2,
                    n_heads: 4,
                    max_seq_len: 32,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    epochs: 100,
                    max_steps: 600,
                    eval_interval: 100,
                    eval_max_blocks: 64,
                    ..TrainConfig::default()
                },
                ..base
            }),
            "tiny" => Some(ExperimentConfig {
                model: ModelConfig {
                    d_model: 32,
                    n_layers: 2,
                    n_heads: 2,
                    max_seq_len: 16,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    epochs: 100,
                    max_steps: 200,
                    eval_interval: 50,
                    eval_max_blocks: 16,
                    ..TrainConfig::default()
                },
                analysis: AnalysisConfig {
                    max_blocks: 16,
                    ..AnalysisConfig::default()
                },
                ..base
            }),
            _ => None,
        }
    }

    /// Loads a preset by name or a TOML file by path.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(c) = Self::preset(source) {
            return Ok(c);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies `key=value` overrides; dotted keys address nested tables.
    /// Values parse as TOML and fall back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        let c: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        if i64::try_from(self.seed).is_err() || i64::try_from(self.model.seed).is_err() {
            return Err(Error::Config(
                "seeds must fit in a signed 64-bit integer".into(),
            ));
        }
        if !(self.leftover > 0.0 && self.leftover <= 1.0) {
            return Err(Error::Config(format!(
                "leftover {} outside (0, 1]",
                self.leftover
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.pruning.threshold > 0.0 && self.pruning.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.pruning.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.pruning.similarity_retention) {
            return Err(Error::Config(
                "similarity_retention must be in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
        }
        if self.data.kind == DataKind::Corpus && self.model.vocab_size < 256 {
            return Err(Error::Config(
                "byte-level corpus needs vocab_size ≥ 256".into(),
            ));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    pub fn selection(&self) -> Selection {
        self.selection
            .unwrap_or_else(|| self.method.default_selection())
    }

    pub fn mask_lr(&self) -> Real {
        self.pruning
            .mask_lr
            .unwrap_or_else(|| self.method.default_mask_lr())
    }

    /// SHA-256 of the canonical TOML form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let canonical = ExperimentConfig {
            out_dir: None,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
