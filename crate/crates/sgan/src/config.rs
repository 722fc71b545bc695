//! Pipeline configuration, loaded from JSON and overridable from the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgan_core::attention::DEFAULT_SALIENCY_THRESHOLD;
use sgan_core::crf::CrfParams;
use sgan_core::losses::DEFAULT_LAMBDA;
use sgan_core::model::Variant;
use sgan_core::nn::BackboneConfig;
use sgan_core::optim::SgdConfig;
use sgan_core::seeds::SeedThresholds;
use sgan_core::synth::DatasetConfig;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SganConfig {
    /// Weight of the seed loss.
    pub lambda: f64,
    /// Block-mean saliency at or above which a feature position is salient.
    pub saliency_threshold: f64,
    /// Learning-rate multiplier for the attention gate `γ`.
    pub gamma_lr_mult: f64,
    /// Learning-rate multiplier for the seed-branch convolution.
    pub seed_branch_lr_mult: f64,
}

impl Default for SganConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            saliency_threshold: DEFAULT_SALIENCY_THRESHOLD,
            gamma_lr_mult: 1.0,
            seed_branch_lr_mult: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub baseline_iterations: usize,
    pub sgan_iterations: usize,
    pub seg_iterations: usize,
    /// Random horizontal flips during training.
    pub flip: bool,
    /// Weight of the boundary (CRF) term in segmentation training.
    pub boundary_weight: f64,
    /// Steps between refreshes of each image's CRF target; 1 refreshes on
    /// every visit.
    pub crf_interval: usize,
    /// Steps between log records.
    pub log_every: usize,
    /// Learning-rate multiplier for the segmentation head convolution.
    pub seg_head_lr_mult: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            baseline_iterations: 2000,
            sgan_iterations: 2000,
            seg_iterations: 2000,
            flip: true,
            boundary_weight: 1.0,
            crf_interval: 1,
            log_every: 10,
            seg_head_lr_mult: 0.01,
        }
    }
}

/// Settings of the full-scale setup, kept for reference only; nothing in
/// the pipeline reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sgan_iterations: usize,
    pub seg_iterations: usize,
    pub crop_size: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            batch_size: 15,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            sgan_iterations: 8000,
            seg_iterations: 12000,
            crop_size: 321,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub sgan: SganConfig,
    pub thresholds: SeedThresholds,
    pub crf: CrfParams,
    pub optimizer: SgdConfig,
    pub training: TrainingConfig,
    pub variant: Variant,
    /// Fraction of training images whose ground truth replaces saliency
    /// and seeds.
    pub semi_fraction: f64,
    /// Seeds model initialisation, batching and augmentation.
    pub seed: u64,
    pub reference: ReferenceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            sgan: SganConfig::default(),
            thresholds: SeedThresholds::default(),
            crf: CrfParams::default(),
            optimizer: SgdConfig::default(),
            training: TrainingConfig::default(),
            variant: Variant::Full,
            semi_fraction: 0.0,
            seed: 0,
            reference: ReferenceConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(PipelineError::io(path))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.thresholds.validate()?;
        self.crf.validate()?;
        self.optimizer.validate()?;
        if self.backbone.in_channels != 3 {
            return bad("backbone.in_channels must be 3 for RGB input");
        }
        if self.dataset.image_size % self.backbone.stride() != 0 {
            return bad("dataset.image_size must be divisible by the backbone stride");
        }
        if !(self.sgan.lambda >= 0.0 && self.sgan.lambda.is_finite()) {
            return bad("sgan.lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.sgan.saliency_threshold) {
            return bad("sgan.saliency_threshold must lie in [0, 1]");
        }
        if !(self.sgan.gamma_lr_mult >= 0.0 && self.sgan.gamma_lr_mult.is_finite()) {
            return bad("sgan.gamma_lr_mult must be non-negative");
        }
        if !(self.sgan.seed_branch_lr_mult >= 0.0 && self.sgan.seed_branch_lr_mult.is_finite()) {
            return bad("sgan.seed_branch_lr_mult must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.semi_fraction) {
            return bad("semi_fraction must lie in [0, 1]");
        }
        if self.training.batch_size == 0 || self.training.crf_interval == 0 || self.training.log_every == 0 {
            return bad("batch_size, crf_interval and log_every must be positive");
        }
        if !(self.training.seg_head_lr_mult >= 0.0 && self.training.seg_head_lr_mult.is_finite()) {
            return bad("training.seg_head_lr_mult must be non-negative");
        }
        if !(self.training.boundary_weight >= 0.0) {
            return bad("training.boundary_weight must be non-negative");
        }
        let grid = (self.dataset.image_size / self.backbone.stride()).pow(2);
        if grid > self.crf.max_positions {
            return bad("feature grid exceeds crf.max_positions");
        }
        Ok(())
    }
}
