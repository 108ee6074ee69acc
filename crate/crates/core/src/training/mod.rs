//! Optimizer, schedule, augmentation and the epoch loop.

pub mod augment;
mod optimizer;
mod schedule;
mod trainer;

pub use augment::{add_noise_snr, mixup_batch, speed_perturb, AugmentConfig, Augmenter, Batch, NoiseSource};
pub use optimizer::{AdamW, GroupConfig, OptimizerConfig};
pub use schedule::{Schedule, ScheduleConfig};
pub use trainer::*;
