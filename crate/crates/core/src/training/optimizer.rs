//! Two-group AdamW with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::model::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// LoRA adapters.
    pub backbone: GroupConfig,
    /// ECAPA, pooling and heads.
    pub downstream: GroupConfig,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Hard cap on epochs; early stopping may end the run sooner.
    pub epochs: u32,
    /// Epochs without dev improvement before stopping.
    pub patience: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            backbone: GroupConfig {
                lr: 5e-5,
                weight_decay: 4e-5,
            },
            downstream: GroupConfig {
                lr: 6e-4,
                weight_decay: 8e-5,
            },
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 15,
            patience: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("backbone", self.backbone), ("downstream", self.downstream)] {
            if !(g.lr > 0.0) || !(g.weight_decay >= 0.0) {
                return Err(SerError::Config(format!(
                    "optim.{name}: need lr > 0 and weight_decay >= 0, got {} / {}",
                    g.lr, g.weight_decay
                )));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(SerError::Config(format!(
                "optim.betas must lie in [0,1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps > 0.0) {
            return Err(SerError::Config("optim.eps must be > 0".into()));
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(SerError::Config("optim.epochs and optim.patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn group(&self, g: ParamGroup) -> Option<GroupConfig> {
        match g {
            ParamGroup::Frozen => None,
            ParamGroup::Backbone => Some(self.backbone),
            ParamGroup::Downstream => Some(self.downstream),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    cfg: OptimizerConfig,
    steps: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            steps: 0,
            state: IndexMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with every group's learning rate multiplied by `lr_scale`.
    /// All gradients are validated before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr_scale: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = grads.get(name) else {
                return Err(SerError::Validation(format!(
                    "no gradient for trainable parameter '{name}'"
                )));
            };
            if g.shape() != p.value.shape() {
                return Err(SerError::Validation(format!(
                    "gradient for '{name}' has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(SerError::NonFinite {
                    what: format!("gradient for '{name}'"),
                });
            }
        }
        self.steps += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            let Some(group) = self.cfg.group(p.group) else {
                continue;
            };
            let lr = group.lr * lr_scale;
            let g = grads[name].data();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                *w -= lr * group.weight_decay * *w + lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
