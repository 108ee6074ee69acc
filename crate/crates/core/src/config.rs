//! Run configuration: one TOML document with a section per subsystem.
//! Every key has a default, unknown keys are rejected, and dotted
//! `section.key=value` overrides are applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::training::{AugmentConfig, OptimizerConfig, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    Merged,
}

impl std::str::FromStr for Granularity {
    type Err = SerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Granularity::Fine),
            "merged" => Ok(Granularity::Merged),
            _ => Err(SerError::Config(format!(
                "granularity must be 'fine' or 'merged', got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub batch_size: usize,
    /// Derive class weights from inverse training-set frequencies.
    pub auto_class_weights: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            batch_size: 32,
            auto_class_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoints averaged by the ensemble.
    pub top_k: usize,
    /// 7 for all classes, 4 for Neutral/Angry/Sad/Happy.
    pub classes: usize,
    pub granularity: Granularity,
    pub merge_cap_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 4,
            classes: 7,
            granularity: Granularity::Fine,
            merge_cap_s: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.data.batch_size == 0 {
            return Err(SerError::Config("data.batch_size must be >= 1".into()));
        }
        if self.eval.top_k == 0 {
            return Err(SerError::Config("eval.top_k must be >= 1".into()));
        }
        if ![4, 7].contains(&self.eval.classes) {
            return Err(SerError::Config(format!(
                "eval.classes must be 4 or 7, got {}",
                self.eval.classes
            )));
        }
        if !(self.eval.merge_cap_s > 0.0) {
            return Err(SerError::Config("eval.merge_cap_s must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SerError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SerError::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            SerError::Config(m) => SerError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `section.key=value` overrides in order. Values are parsed as
    /// TOML (`0.5`, `true`, `[1, 4]`) and fall back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| SerError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| SerError::Config(format!("override '{o}' is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in parents {
                let entry = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| SerError::Config(format!("override '{key}': '{p}' is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| SerError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
