//! The experiment document: one JSON object with `data`, `model` and `train`
//! sections. Every field has a default, so `{}` is a valid config.

use std::path::Path;

use fairmoe_core::data::SynthConfig;
use fairmoe_core::moe::RouteMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// One conv block: conv, then relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Replace this conv with a mixture-of-experts conv.
    #[serde(default)]
    pub moe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Experts per MoE layer; must equal the number of groups.
    pub experts: usize,
    pub router_width: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |channels| BlockSpec {
            channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            moe: true,
        };
        Self {
            in_channels: 1,
            blocks: vec![block(8), block(16), block(32), block(64)],
            experts: 2,
            router_width: 8,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one conv block".into()));
        }
        if self.in_channels == 0 || self.classes < 2 || self.router_width == 0 {
            return Err(Error::Config("in_channels, router_width must be positive and classes >= 2".into()));
        }
        if self.moe_layers().next().is_some() && self.experts == 0 {
            return Err(Error::Config("MoE layers need at least one expert".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Config(format!("block {i} has a zero extent: {b:?}")));
            }
        }
        Ok(())
    }

    /// Indices of the blocks flagged as MoE.
    pub fn moe_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().enumerate().filter(|(_, b)| b.moe).map(|(i, _)| i)
    }

    /// The same backbone with exactly the last `count` blocks flagged as MoE.
    pub fn with_trailing_moe(&self, count: usize) -> Self {
        let n = self.blocks.len();
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            b.moe = i + count >= n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for router parameters.
    pub router_lr_scale: f64,
    pub optimizer: OptimizerKind,
    pub w_mi: f64,
    pub seed: u64,
    pub train_routing: RouteMode,
    pub infer_routing: RouteMode,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            router_lr_scale: 10.0,
            optimizer: OptimizerKind::Adam,
            w_mi: 0.01,
            seed: 0,
            train_routing: RouteMode::Sample,
            infer_routing: RouteMode::Argmax,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.router_lr_scale >= 0.0) || !(self.w_mi >= 0.0) {
            return Err(Error::Config("lr must be positive; router_lr_scale and w_mi nonnegative".into()));
        }
        for mode in [self.train_routing, self.infer_routing] {
            if mode == RouteMode::Forced {
                return Err(Error::Config("forced routing is a test hook, not a training mode".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.data.train_fraction)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
