//! Experiment configuration: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Values left out keep their defaults; command-line
//! flags are applied on top by the caller.
//!
//! ```text
//! seed = 7
//! [data]
//! train_per_task = 100
//! [lora]
//! learning_rate = 1e-3
//! loss.gaussian_noise = mse
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::degradations::DataConfig;
use crate::error::{config_err, Result};
use crate::restorer::{Loss, ModelConfig, TrainConfig};
use crate::router::RouterTrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub width: usize,
    pub outer_rank: usize,
    pub bottleneck_rank: usize,
    /// Adapted layer names; `None` adapts every conv layer.
    pub adapted: Option<Vec<String>>,
    pub pretrain: TrainConfig,
    pub lora: TrainConfig,
    /// Per-task loss overrides for adapter training.
    pub lora_loss: BTreeMap<String, Loss>,
    pub router: RouterTrainConfig,
    pub router_latent: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            width: 16,
            outer_rank: 4,
            bottleneck_rank: 8,
            adapted: None,
            pretrain: TrainConfig {
                learning_rate: 2e-3,
                iterations: 3000,
                ..TrainConfig::default()
            },
            lora: TrainConfig {
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            lora_loss: BTreeMap::new(),
            router: RouterTrainConfig::default(),
            router_latent: crate::router::DEFAULT_LATENT,
        }
    }
}

impl FromStr for Loss {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Loss::L1),
            "mse" => Ok(Loss::Mse),
            other => Err(config_err!("unknown loss {other:?} (expected l1 or mse)")),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("bad value {value:?} for {key}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", no + 1))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value)
                .map_err(|e| config_err!("line {}: {e}", no + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        match (section, key) {
            ("", "seed") => self.seed = parse(&full, value)?,
            ("data", "height") => self.data.height = parse(&full, value)?,
            ("data", "width") => self.data.width = parse(&full, value)?,
            ("data", "train_per_task") => self.data.train_per_task = parse(&full, value)?,
            ("data", "test_per_task") => self.data.test_per_task = parse(&full, value)?,
            ("data", "mixed_per_task") => self.data.mixed_per_task = parse(&full, value)?,
            ("model", "width") => self.width = parse(&full, value)?,
            ("model", "outer_rank") => self.outer_rank = parse(&full, value)?,
            ("model", "bottleneck_rank") => self.bottleneck_rank = parse(&full, value)?,
            ("model", "adapted") => {
                self.adapted = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            ("pretrain", _) => set_train(&mut self.pretrain, &full, key, value)?,
            ("lora", k) if k.starts_with("loss.") => {
                self.lora_loss.insert(k["loss.".len()..].to_string(), parse(&full, value)?);
            }
            ("lora", _) => set_train(&mut self.lora, &full, key, value)?,
            ("router", "learning_rate") => self.router.learning_rate = parse(&full, value)?,
            ("router", "iterations") => self.router.iterations = parse(&full, value)?,
            ("router", "batch_size") => self.router.batch_size = parse(&full, value)?,
            ("router", "logit_scale") => self.router.logit_scale = parse(&full, value)?,
            ("router", "latent") => self.router_latent = parse(&full, value)?,
            _ => return Err(config_err!("unknown key {full}")),
        }
        Ok(())
    }

    /// Copies the master seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn model_config(&self, labels: Vec<String>) -> ModelConfig {
        let mut m = ModelConfig::new(labels);
        m.width = self.width;
        m.outer_rank = self.outer_rank;
        m.bottleneck_rank = self.bottleneck_rank;
        if let Some(a) = &self.adapted {
            m.adapted = a.clone();
        }
        m
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn lora_config(&self, label: &str) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            loss: self.lora_loss.get(label).copied().unwrap_or(self.lora.loss),
            ..self.lora.clone()
        }
    }

    pub fn router_config(&self) -> RouterTrainConfig {
        RouterTrainConfig {
            seed: self.seed,
            ..self.router.clone()
        }
    }
}

fn set_train(cfg: &mut TrainConfig, full: &str, key: &str, value: &str) -> Result<()> {
    match key {
        "learning_rate" => cfg.learning_rate = parse(full, value)?,
        "iterations" => cfg.iterations = parse(full, value)?,
        "batch_size" => cfg.batch_size = parse(full, value)?,
        "weight_decay" => cfg.weight_decay = parse(full, value)?,
        "loss" => cfg.loss = parse(full, value)?,
        _ => return Err(config_err!("unknown key {full}")),
    }
    Ok(())
}
