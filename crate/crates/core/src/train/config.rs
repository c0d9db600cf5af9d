use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{AdamConfig, DiscriminatorConfig, GanLoss, GeneratorConfig};

/// Default values shared by [`TrainConfig::default`] and the command line.
pub mod defaults {
    pub const EPOCHS: u64 = 200;
    pub const BATCH_SIZE: usize = 10;
    pub const LR: f32 = 2e-4;
    pub const BETA1: f32 = 0.5;
    pub const BETA2: f32 = 0.999;
    pub const L1_WEIGHT: f32 = 0.0;
    pub const ADV_WEIGHT: f32 = 1.0;
    pub const SEED: u64 = 0;
    pub const CHECKPOINT_EVERY: u64 = 1;
    pub const SAMPLE_EVERY: u64 = 100;
    pub const RESIZE_TO: usize = crate::data::DEFAULT_RESIZE;
    pub const D_STEPS: usize = 1;
    pub const SHUFFLE: bool = true;
    pub const SWAP_HALVES: bool = false;
    pub const OUTPUT_DIR: &str = "runs/mapgan";
    /// Rows in each periodic sample grid.
    pub const SAMPLE_ROWS: usize = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub gan_loss: GanLoss,
    /// Weight of the L1 reconstruction term; 0 disables it.
    pub l1_weight: f32,
    /// Weight of the adversarial generator term; 0 disables it.
    pub adv_weight: f32,
    pub seed: u64,
    /// In epochs.
    pub checkpoint_every: u64,
    /// In steps.
    pub sample_every: u64,
    pub resize_to: usize,
    pub swap_halves: bool,
    pub shuffle: bool,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_root: PathBuf::new(),
            output_dir: PathBuf::from(defaults::OUTPUT_DIR),
            epochs: defaults::EPOCHS,
            batch_size: defaults::BATCH_SIZE,
            lr: defaults::LR,
            beta1: defaults::BETA1,
            beta2: defaults::BETA2,
            gan_loss: GanLoss::default(),
            l1_weight: defaults::L1_WEIGHT,
            adv_weight: defaults::ADV_WEIGHT,
            seed: defaults::SEED,
            checkpoint_every: defaults::CHECKPOINT_EVERY,
            sample_every: defaults::SAMPLE_EVERY,
            resize_to: defaults::RESIZE_TO,
            swap_halves: defaults::SWAP_HALVES,
            shuffle: defaults::SHUFFLE,
            d_steps: defaults::D_STEPS,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size as u64),
            ("checkpoint_every", self.checkpoint_every),
            ("sample_every", self.sample_every),
            ("resize_to", self.resize_to as u64),
            ("d_steps", self.d_steps as u64),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        for (name, w) in [("l1_weight", self.l1_weight), ("adv_weight", self.adv_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.l1_weight == 0.0 && self.adv_weight == 0.0 {
            return Err(Error::invalid("the generator objective is empty: l1_weight and adv_weight are both 0"));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.image_channels != self.discriminator.image_channels {
            return Err(Error::invalid("generator and discriminator disagree on image channels"));
        }
        self.generator
            .check_input_size(self.resize_to, self.resize_to)
            .map_err(|e| Error::invalid(format!("resize_to {}: {e}", self.resize_to)))?;
        if DiscriminatorConfig::patch_size(self.resize_to) == 0 {
            return Err(Error::invalid(format!(
                "resize_to {} is too small for the discriminator (minimum 24)",
                self.resize_to
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}
