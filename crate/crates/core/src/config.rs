//! Declarative run configuration (TOML).
//!
//! Every section rejects unknown keys, and [`RunConfig::validate`] runs
//! before any command touches the filesystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::branches::FusionStrategy;
use crate::error::{Error, Result};
use crate::fsm::FsmConfig;
use crate::indicators::{PromptPair, DEFAULT_LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length images are resized to before the backbone.
    pub image_size: usize,
    pub backbone: BackboneSpec,
    pub branch_hidden: usize,
    pub fusion: FusionStrategy,
    pub fsm: FsmConfig,
    pub value_hidden: usize,
    /// Forces `k1 = k2 = n` regardless of the indicators (fixed-depth
    /// ablation).
    pub fixed_depth: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            backbone: BackboneSpec::default(),
            branch_hidden: 256,
            fusion: FusionStrategy::Add,
            fsm: FsmConfig::default(),
            value_hidden: 32,
            fixed_depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorBackendKind {
    /// High-frequency proxies, no model required.
    Proxy,
    /// Paired-prompt scoring over a precomputed embedding table.
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    pub backend: IndicatorBackendKind,
    pub embeddings_path: Option<PathBuf>,
    pub temperature: f64,
    pub vqi_levels: usize,
    pub fii_levels: usize,
    pub vqi_prompts: PromptPair,
    pub fii_prompts: PromptPair,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            backend: IndicatorBackendKind::Proxy,
            embeddings_path: None,
            temperature: 1.0,
            vqi_levels: DEFAULT_LEVELS,
            fii_levels: DEFAULT_LEVELS,
            vqi_prompts: PromptPair::quality(),
            fii_prompts: PromptPair::identifiability(),
        }
    }
}

/// Steps whose confidences enter the hard-sample entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegPlacement {
    First,
    Last,
    #[default]
    LastAndPreceding,
}

/// Sign convention of the hard-sample entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegVariant {
    /// Minimizing the loss raises entropy (defers early decisions).
    #[default]
    DeferDecision,
    /// `Σ Π(x)·H(c)` minimized as written, which lowers entropy.
    LiteralFormula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReturnRule {
    /// `R_t = Σ_{τ ≥ t} r_τ`.
    #[default]
    RewardToGo,
    /// `R_t = Σ_τ r_τ` for every t.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Overrides `learning_rate` in stage II when set.
    pub stage2_learning_rate: Option<f64>,
    pub focal_gamma: f64,
    pub reg_placement: RegPlacement,
    pub reg_variant: RegVariant,
    /// Set to false to drop the hard-sample term entirely.
    pub use_reg_loss: bool,
    pub return_rule: ReturnRule,
    pub normalize_advantages: bool,
    /// Parallel workers for per-sample gradients; 1 is single-worker mode.
    pub workers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage2_epochs: 5,
            batch_size: 32,
            learning_rate: 5e-5,
            stage2_learning_rate: None,
            focal_gamma: 2.0,
            reg_placement: RegPlacement::LastAndPreceding,
            reg_variant: RegVariant::DeferDecision,
            use_reg_loss: true,
            return_rule: ReturnRule::RewardToGo,
            normalize_advantages: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub ppo_epochs_per_batch: usize,
    pub entropy_coefficient: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            ppo_epochs_per_batch: 4,
            entropy_coefficient: 0.01,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "ppo.clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.ppo_epochs_per_batch == 0 {
            return Err(Error::Config("ppo.ppo_epochs_per_batch must be >= 1".into()));
        }
        if !(self.entropy_coefficient >= 0.0) {
            return Err(Error::Config("ppo.entropy_coefficient must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    None,
    #[default]
    RandomJpeg,
    FixedJpeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPolicy {
    pub mode: CompressionMode,
    /// Inclusive JPEG quality range; `fixed_jpeg` uses the lower end.
    pub quality_range: [u8; 2],
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            mode: CompressionMode::RandomJpeg,
            quality_range: [30, 100],
        }
    }
}

impl CompressionPolicy {
    pub fn none() -> Self {
        Self {
            mode: CompressionMode::None,
            quality_range: [100, 100],
        }
    }

    pub fn fixed(quality: u8) -> Self {
        Self {
            mode: CompressionMode::FixedJpeg,
            quality_range: [quality, quality],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.quality_range;
        if lo == 0 || hi > 100 || lo > hi {
            return Err(Error::Config(format!(
                "JPEG quality range must satisfy 1 <= lo <= hi <= 100, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.mode {
            CompressionMode::None => "none".into(),
            CompressionMode::RandomJpeg => {
                format!("random_jpeg[{}-{}]", self.quality_range[0], self.quality_range[1])
            }
            CompressionMode::FixedJpeg => format!("fixed_jpeg[{}]", self.quality_range[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    /// Side length of generated images.
    pub side: usize,
    pub artifact_strength: f64,
    pub quality_range: [u8; 2],
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            side: 64,
            artifact_strength: 0.5,
            quality_range: [30, 100],
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest listing train and test entries (split column).
    pub manifest: PathBuf,
    pub train_compression: CompressionPolicy,
    pub test_compression: CompressionPolicy,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.tsv"),
            train_compression: CompressionPolicy::default(),
            test_compression: CompressionPolicy::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fit quantizers automatically at the start of `train` when missing.
    pub auto_fit_indicators: bool,
    pub model: ModelConfig,
    pub indicators: IndicatorConfig,
    pub training: TrainingConfig,
    pub ppo: PpoConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            auto_fit_indicators: true,
            model: ModelConfig::default(),
            indicators: IndicatorConfig::default(),
            training: TrainingConfig::default(),
            ppo: PpoConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.manifest);
        if let Some(p) = self.indicators.embeddings_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.model.backbone.pretrained_path.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.backbone.validate()?;
        if m.image_size < crate::backbone::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "model.image_size must be >= {}",
                crate::backbone::MIN_IMAGE_SIDE
            )));
        }
        if m.branch_hidden == 0 || m.value_hidden == 0 || m.fsm.hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if let Some(d) = m.fsm.delta {
            if d == 0 || d > m.backbone.output_channels {
                return Err(Error::Config(format!(
                    "model.fsm.delta must lie in 1..={}",
                    m.backbone.output_channels
                )));
            }
        }
        if m.fixed_depth == Some(0) {
            return Err(Error::Config("model.fixed_depth must be >= 1".into()));
        }
        let ind = &self.indicators;
        if ind.vqi_levels < 2 || ind.fii_levels < 2 {
            return Err(Error::Config("indicator levels must be >= 2".into()));
        }
        if !(ind.temperature > 0.0) {
            return Err(Error::Config("indicators.temperature must be positive".into()));
        }
        ind.vqi_prompts.validate()?;
        ind.fii_prompts.validate()?;
        if ind.backend == IndicatorBackendKind::Embeddings && ind.embeddings_path.is_none() {
            return Err(Error::Config(
                "indicators.embeddings_path is required for the embeddings backend".into(),
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if !(t.learning_rate >= 0.0) || t.stage2_learning_rate.is_some_and(|lr| !(lr >= 0.0)) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(t.focal_gamma >= 0.0) {
            return Err(Error::Config("training.focal_gamma must be >= 0".into()));
        }
        if t.workers == 0 {
            return Err(Error::Config("training.workers must be >= 1".into()));
        }
        self.ppo.validate()?;
        self.data.train_compression.validate()?;
        self.data.test_compression.validate()?;
        let s = &self.data.synth;
        if s.n_per_class == 0 || !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::Config(
                "data.synth needs n_per_class >= 1 and train_fraction in (0, 1)".into(),
            ));
        }
        if s.side < crate::backbone::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "data.synth.side must be >= {}",
                crate::backbone::MIN_IMAGE_SIDE
            )));
        }
        if !(0.0..=1.0).contains(&s.artifact_strength) {
            return Err(Error::Config("data.synth.artifact_strength must lie in [0, 1]".into()));
        }
        CompressionPolicy {
            mode: CompressionMode::RandomJpeg,
            quality_range: s.quality_range,
        }
        .validate()?;
        Ok(())
    }
}
