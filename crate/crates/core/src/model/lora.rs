//! Low-rank adapters on frozen projections: `W' = W + (alpha / rank) · B · A`.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SerError};
use crate::model::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 3] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value];

    pub fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
        }
    }
}

/// `a: [rank×in]`, `b: [out×rank]`. `b` starts at zero so a fresh adapter is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub a: Tensor,
    pub b: Tensor,
    pub target: LoraTarget,
}

impl LoraAdapter {
    /// Reads the adapter stored under `<prefix>.lora.{A,B}`.
    pub fn from_store(store: &ParamStore, prefix: &str, alpha: f64, target: LoraTarget) -> Result<Self> {
        let a = store.tensor(&format!("{prefix}.lora.A"))?.clone();
        let b = store.tensor(&format!("{prefix}.lora.B"))?.clone();
        Ok(LoraAdapter {
            rank: a.rows(),
            alpha,
            a,
            b,
            target,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `(alpha/rank) · B · A`.
    pub fn delta(&self) -> Result<Tensor> {
        if self.a.rank() != 2 || self.b.rank() != 2 || self.a.rows() != self.rank || self.b.cols() != self.rank {
            return Err(SerError::Config(format!(
                "lora rank mismatch: rank {}, A {:?}, B {:?}",
                self.rank,
                self.a.shape(),
                self.b.shape()
            )));
        }
        let s = self.scaling();
        Ok(self.b.matmul(&self.a)?.map(|v| s * v))
    }
}

/// Folds `adapter` into `base_weight: [out×in]`.
pub fn lora_merge(base_weight: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.delta()?;
    if delta.shape() != base_weight.shape() {
        return Err(SerError::Config(format!(
            "adapter update {:?} does not fit base weight {:?}",
            delta.shape(),
            base_weight.shape()
        )));
    }
    let data = base_weight
        .data()
        .iter()
        .zip(delta.data())
        .map(|(w, d)| w + d)
        .collect();
    Tensor::new(base_weight.shape().to_vec(), data)
}

/// `x·Wᵀ + b`, plus `scaling · (x·Aᵀ)·Bᵀ` when `scaling` is given.
pub(crate) fn projection(g: &mut Graph, p: &Bound, prefix: &str, x: Var, lora_scaling: Option<f64>) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let base = g.linear(x, w, Some(b))?;
    let Some(scaling) = lora_scaling else {
        return Ok(base);
    };
    let a = p.var(&format!("{prefix}.lora.A"))?;
    let bm = p.var(&format!("{prefix}.lora.B"))?;
    let low = g.linear(x, a, None)?;
    let up = g.linear(low, bm, None)?;
    let up = g.scale(up, scaling)?;
    g.add(base, up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adapter(a: Tensor, b: Tensor, alpha: f64) -> LoraAdapter {
        LoraAdapter {
            rank: a.rows(),
            alpha,
            a,
            b,
            target: LoraTarget::Query,
        }
    }

    #[test]
    fn zero_b_leaves_weight_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let ad = adapter(Tensor::randn(&[4, 8], 0.02, &mut rng), Tensor::zeros(&[8, 4]), 8.0);
        assert_eq!(lora_merge(&w, &ad).unwrap(), w);
    }

    #[test]
    fn identity_construction_adds_identity() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[d, d], 1.0, &mut rng);
        let ad = adapter(Tensor::identity(d), Tensor::identity(d), d as f64);
        let merged = lora_merge(&w, &ad).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expect = w.at(i, j) + if i == j { 1.0 } else { 0.0 };
                assert_eq!(merged.at(i, j), expect);
            }
        }
    }

    #[test]
    fn rank_mismatch_is_config_error() {
        let w = Tensor::zeros(&[4, 4]);
        let ad = LoraAdapter {
            rank: 2,
            alpha: 1.0,
            a: Tensor::zeros(&[2, 4]),
            b: Tensor::zeros(&[4, 3]),
            target: LoraTarget::Value,
        };
        assert!(matches!(lora_merge(&w, &ad), Err(SerError::Config(_))));
    }
}
