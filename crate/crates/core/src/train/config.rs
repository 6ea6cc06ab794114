use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vsr::GeneratorArch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 1.0,
            adversarial: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Fixed seeded convolution stack; offline stand-in for a pretrained network.
    Random,
    /// Pretrained VGG19 `features.*` weights from a safetensors file.
    Vgg19,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub extractor: ExtractorKind,
    pub weights: Option<PathBuf>,
    /// Layer name to weight, e.g. `conv5_4 = 1.0` (VGG) or `stage2 = 1.0` (random).
    pub layers: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::Random,
            weights: None,
            layers: BTreeMap::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub base_width: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { base_width: 64 }
    }
}

/// Optimization settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: u64,
    /// Defaults to 2e-4 in stage 1 and 1e-4 in stage 2.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// HR patch side; the LR patch is a quarter of it.
    pub patch_size: usize,
    pub seed: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub perceptual: PerceptualConfig,
    pub discriminator: DiscConfig,
    pub generator: GeneratorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            iterations: 300_000,
            learning_rate: None,
            batch_size: 4,
            seq_len: 15,
            patch_size: 256,
            seed: 0,
            checkpoint_every: 5_000,
            loss: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            discriminator: DiscConfig::default(),
            generator: GeneratorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate
            .unwrap_or(if self.stage >= 2 { 1e-4 } else { 2e-4 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 16 (LR patch divisible by 4)",
                self.patch_size
            )));
        }
        if self.seq_len < 3 {
            return Err(Error::Config(format!("seq_len {} must be at least 3", self.seq_len)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr())));
        }
        let w = &self.loss;
        if [w.l1, w.perceptual, w.adversarial].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.discriminator.base_width == 0 || self.generator.channels == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}
