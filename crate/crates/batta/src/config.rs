//! Run configuration: one JSON document with every knob, overridable by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::encoder::InjectionStrategy;
use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::train::PretrainConfig;
use crate::tta::{AdaptationConfig, PromptKind};

/// Encoder-side prompt injection applied at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub strategy: InjectionStrategy,
    pub stages: usize,
    pub gain: f64,
}

impl InjectionConfig {
    pub const NONE: Self = Self {
        strategy: InjectionStrategy::None,
        stages: 0,
        gain: 1.0,
    };

    pub const GAUSSIAN_ALL: Self = Self {
        strategy: InjectionStrategy::GaussianPreBlock,
        stages: 4,
        gain: 1.0,
    };

    /// `model` with this injection in place of its own.
    pub fn apply(&self, model: &ModelConfig) -> Result<ModelConfig> {
        let mut m = model.clone();
        m.encoder.injection_strategy = self.strategy;
        m.encoder.injection_stages = self.stages;
        m.encoder.injection_gain = self.gain;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub label: String,
    pub out: Option<PathBuf>,
    /// Benchmark root (holding `train/`, `val/`, `test/`) or a single
    /// `images/` + `masks/` folder.
    pub data: PathBuf,
    pub split: String,
    pub checkpoint: Option<PathBuf>,
    pub prompt: PromptKind,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub eval_injection: InjectionConfig,
    pub adapt_injection: InjectionConfig,
    pub adaptation: AdaptationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label: "run".to_string(),
            out: None,
            data: PathBuf::from("data"),
            split: "test".to_string(),
            checkpoint: None,
            prompt: PromptKind::Box,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            eval_injection: InjectionConfig::NONE,
            adapt_injection: InjectionConfig::GAUSSIAN_ALL,
            adaptation: AdaptationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            return Err(invalid("label must be a non-empty file-name-safe string"));
        }
        self.model.validate()?;
        self.dataset.validate()?;
        if self.dataset.image_size != self.model.encoder.image_size {
            return Err(invalid("dataset image_size must equal the encoder image_size"));
        }
        self.pretrain.validate()?;
        self.eval_injection.apply(&self.model)?;
        self.adapt_injection.apply(&self.model)?;
        self.adaptation.validate(self.model.encoder.depth)?;
        Ok(())
    }

    /// Config as recorded in run artifacts: independent of where outputs go.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_value(c).expect("config serialises")
    }

    /// Folder holding `images/` and `masks/` for `split`.
    pub fn split_dir(&self, split: &str) -> PathBuf {
        let nested = self.data.join(split);
        if nested.is_dir() || !self.data.join("images").is_dir() {
            nested
        } else {
            self.data.clone()
        }
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| invalid("a checkpoint is required (--checkpoint)"))
    }

    /// `--out` when given, otherwise `{BATTA_OUT_ROOT or ./runs}/{label}-{unix seconds}`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os("BATTA_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        root.join(format!("{}-{secs}", self.label))
    }
}
