//! Linear warmup followed by cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_ratio: f64,
    /// Floor of the cosine phase, as a fraction of the peak.
    pub min_lr_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_ratio: 0.08,
            min_lr_factor: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(SerError::Config(format!(
                "schedule.warmup_ratio must be in (0,1), got {}",
                self.warmup_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.min_lr_factor) {
            return Err(SerError::Config(format!(
                "schedule.min_lr_factor must be in [0,1], got {}",
                self.min_lr_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    cfg: ScheduleConfig,
    total_steps: u64,
    warmup_steps: u64,
}

impl Schedule {
    pub fn new(cfg: ScheduleConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(SerError::Config("schedule needs at least one step".into()));
        }
        let warmup_steps = ((cfg.warmup_ratio * total_steps as f64).round() as u64).clamp(1, (total_steps - 1).max(1));
        Ok(Schedule {
            cfg,
            total_steps,
            warmup_steps,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    /// Multiplier of the peak rate at `step`. Steps past the end clamp to the final value.
    pub fn factor(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            log::debug!("schedule step {step} past total {}; clamping", self.total_steps);
            self.total_steps
        } else {
            step
        };
        if step <= self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let m = self.cfg.min_lr_factor;
        m + (1.0 - m) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn lr(&self, step: u64, peak: f64) -> f64 {
        peak * self.factor(step)
    }
}
