//! Run configuration: architecture and training hyperparameters, fusion
//! mode, and a flat sectioned key-value config file format with flag
//! overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    BadLine(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Cat,
    Attn,
}

impl FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cat" => Ok(FusionMode::Cat),
            "attn" => Ok(FusionMode::Attn),
            other => Err(format!("fusion mode must be cat|attn, got {other}")),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cat => "cat",
            FusionMode::Attn => "attn",
        })
    }
}

/// Architecture hyperparameters. Desk defaults; the full-scale values the
/// reference system used (H=512, 8 heads, 12+4 blocks) remain configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_head: usize,
    /// Transformer blocks in the structure predictor.
    pub n_struct_layers: usize,
    /// Shared trunk blocks in the generator ensemble.
    pub n_shared: usize,
    /// Independent blocks per sub-generator.
    pub n_indep: usize,
    /// Number of sub-generator categories.
    pub n_generators: usize,
    pub max_phases: usize,
    pub max_phase_tokens: usize,
    pub max_recipe_tokens: usize,
    /// Whole-recipe single-decoder mode (no structure prediction, no phase
    /// routing); used as the comparison baseline.
    pub baseline: bool,
    /// Keep image-encoder weights fixed during training.
    pub freeze_image_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            n_head: 4,
            n_struct_layers: 2,
            n_shared: 2,
            n_indep: 1,
            n_generators: 3,
            max_phases: 3,
            max_phase_tokens: 60,
            max_recipe_tokens: 150,
            baseline: false,
            freeze_image_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub lambda_pre: f64,
    pub lambda_gen: f64,
    pub lambda_pos: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            lr_decay: 0.99,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            val_fraction: 0.1,
            lambda_pre: 1.0,
            lambda_gen: 1.0,
            lambda_pos: 0.1,
            grad_clip: 5.0,
        }
    }
}

/// Fully resolved configuration for a pipeline run. A serialized copy is
/// written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionMode::Attn,
        }
    }
}

impl RunConfig {
    /// Parse the flat `[section]` / `key = value` format.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine(i + 1))?;
            let key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.set(&key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Apply a single `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
            })
        }
        match key {
            "model.hidden" => self.model.hidden = parse(key, value)?,
            "model.n_head" => self.model.n_head = parse(key, value)?,
            "model.n_struct_layers" => self.model.n_struct_layers = parse(key, value)?,
            "model.n_shared" => self.model.n_shared = parse(key, value)?,
            "model.n_indep" => self.model.n_indep = parse(key, value)?,
            "model.n_generators" => self.model.n_generators = parse(key, value)?,
            "model.max_phases" => self.model.max_phases = parse(key, value)?,
            "model.max_phase_tokens" => self.model.max_phase_tokens = parse(key, value)?,
            "model.max_recipe_tokens" => self.model.max_recipe_tokens = parse(key, value)?,
            "model.baseline" => self.model.baseline = parse(key, value)?,
            "model.freeze_image_encoder" => self.model.freeze_image_encoder = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.val_fraction" => self.train.val_fraction = parse(key, value)?,
            "train.lambda_pre" => self.train.lambda_pre = parse(key, value)?,
            "train.lambda_gen" => self.train.lambda_gen = parse(key, value)?,
            "train.lambda_pos" => self.train.lambda_pos = parse(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, value)?,
            "fusion" => {
                self.fusion = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                })?
            }
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.train.learning_rate <= 0.0 {
            return Err("learning rate must be positive".into());
        }
        if !(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0) {
            return Err("lr decay must be in (0, 1]".into());
        }
        if self.model.hidden % self.model.n_head != 0 {
            return Err(format!(
                "hidden {} not divisible by n_head {}",
                self.model.hidden, self.model.n_head
            ));
        }
        if self.model.n_generators == 0 {
            return Err("need at least one sub-generator".into());
        }
        Ok(())
    }

    /// Render back to the file format (diff-friendly snapshot).
    pub fn to_file_string(&self) -> String {
        let mut sections: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        sections.insert(
            "model",
            vec![
                format!("hidden = {}", self.model.hidden),
                format!("n_head = {}", self.model.n_head),
                format!("n_struct_layers = {}", self.model.n_struct_layers),
                format!("n_shared = {}", self.model.n_shared),
                format!("n_indep = {}", self.model.n_indep),
                format!("n_generators = {}", self.model.n_generators),
                format!("max_phases = {}", self.model.max_phases),
                format!("max_phase_tokens = {}", self.model.max_phase_tokens),
                format!("max_recipe_tokens = {}", self.model.max_recipe_tokens),
                format!("baseline = {}", self.model.baseline),
                format!("freeze_image_encoder = {}", self.model.freeze_image_encoder),
            ],
        );
        sections.insert(
            "train",
            vec![
                format!("learning_rate = {}", self.train.learning_rate),
                format!("lr_decay = {}", self.train.lr_decay),
                format!("epochs = {}", self.train.epochs),
                format!("batch_size = {}", self.train.batch_size),
                format!("seed = {}", self.train.seed),
                format!("val_fraction = {}", self.train.val_fraction),
                format!("lambda_pre = {}", self.train.lambda_pre),
                format!("lambda_gen = {}", self.train.lambda_gen),
                format!("lambda_pos = {}", self.train.lambda_pos),
                format!("grad_clip = {}", self.train.grad_clip),
            ],
        );
        let mut out = format!("fusion = {}\n", self.fusion);
        for (name, lines) in sections {
            out.push_str(&format!("\n[{name}]\n"));
            for l in lines {
                out.push_str(&l);
                out.push('\n');
            }
        }
        out
    }
}
