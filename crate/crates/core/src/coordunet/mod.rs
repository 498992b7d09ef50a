//! Coordinate-aware 3-D U-Net: layers with hand-written backward passes,
//! the sparse-label Dice loss, AdamW training and inference.

mod checkpoint;
mod grid;
pub mod layers;
mod loss;
mod net;
mod optim;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use grid::FeatureGrid;
pub use layers::{coordinate_channels, conv3d_replicate, instance_norm, leaky_relu, maxpool2, trilinear_up2};
pub use loss::masked_dice_loss;
pub use net::{Tape, Tensor, UNet};
pub use optim::AdamW;
pub use train::{argmax_classes, infer, train, Inference, Sample, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub output_classes: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub instance_norm_epsilon: f64,
    pub dice_epsilon: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 4,
            base_channels: 8,
            input_channels: 4,
            output_classes: NUM_CLASSES,
            kernel_size: 3,
            leaky_slope: 0.01,
            instance_norm_epsilon: 1e-5,
            dice_epsilon: 1e-5,
            seed: 1234,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 4 {
            return Err(Error::invalid(format!("levels must be 4, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be at least 1"));
        }
        if self.input_channels != 4 {
            return Err(Error::invalid("input_channels must be 4 (image plus 3 coordinates)"));
        }
        if self.output_classes != NUM_CLASSES {
            return Err(Error::invalid(format!("output_classes must be {NUM_CLASSES}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if !(self.leaky_slope >= 0.0) || !(self.instance_norm_epsilon > 0.0) || !(self.dice_epsilon >= 0.0) {
            return Err(Error::invalid("slope and epsilons must be nonnegative (norm epsilon positive)"));
        }
        Ok(())
    }
}

/// Learning-rate schedule, applied at the end of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after `patience` epochs without improvement of
    /// the monitored loss (validation if present, else training).
    Plateau { factor: f64, patience: usize },
    /// Multiply by `factor` every `every` epochs.
    Step { factor: f64, every: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub early_stop_patience: Option<usize>,
    /// `None` trains on center crops only.
    pub augmentation: Option<AugmentConfig>,
    pub crop_dims: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 200,
            schedule: LrSchedule::Step { factor: 0.9, every: 10 },
            early_stop_patience: None,
            augmentation: Some(AugmentConfig::default()),
            crop_dims: [96, 96, 96],
        }
    }
}

impl TrainConfig {
    /// Settings for cross-validation runs with a held-out validation set.
    pub fn cross_validation() -> Self {
        TrainConfig {
            schedule: LrSchedule::Plateau { factor: 0.9, patience: 5 },
            early_stop_patience: Some(15),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        match self.schedule {
            LrSchedule::Plateau { factor, .. } | LrSchedule::Step { factor, .. } if !(factor > 0.0 && factor <= 1.0) => {
                return Err(Error::invalid("schedule factor must lie in (0, 1]"));
            }
            LrSchedule::Step { every: 0, .. } => return Err(Error::invalid("step schedule period must be positive")),
            _ => {}
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
            if a.crop_dims != self.crop_dims {
                return Err(Error::invalid(format!(
                    "augmentation crop {:?} differs from training crop {:?}",
                    a.crop_dims, self.crop_dims
                )));
            }
        }
        Ok(())
    }
}
