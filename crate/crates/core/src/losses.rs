//! Hybrid objective: label-smoothed weighted cross-entropy on the categorical
//! head plus `1 − CCC` on the dimensional head.
//!
//! Every loss has a graph form (used for training and gradient checks) and a
//! plain form, which builds a throwaway graph so both share one definition.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SerError};
use crate::model::{NUM_CLASSES, NUM_DIMS};
use crate::tensor::Tensor;

/// Probabilities are clamped to this before the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cat: f64,
    pub lambda_dim: f64,
    pub epsilon_smooth: f64,
    pub class_weights: Vec<f64>,
    pub eps_ccc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cat: 1.0,
            lambda_dim: 0.5,
            epsilon_smooth: 0.1,
            class_weights: vec![1.0; NUM_CLASSES],
            eps_ccc: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cat >= 0.0 && self.lambda_dim >= 0.0) {
            return Err(SerError::Config("loss weights must be >= 0".into()));
        }
        check_epsilon(self.epsilon_smooth)?;
        check_weights(&self.class_weights)?;
        if !(self.eps_ccc >= 0.0) {
            return Err(SerError::Config("loss.eps_ccc must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-sample arousal/valence/dominance targets with a presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DimTargets {
    pub values: Tensor,
    pub present: Vec<bool>,
}

impl DimTargets {
    pub fn new(values: Tensor, present: Vec<bool>) -> Result<Self> {
        if values.rank() != 2 || values.cols() != NUM_DIMS || values.rows() != present.len() {
            return Err(SerError::Validation(format!(
                "dim targets must be [n×{NUM_DIMS}] with n mask entries, got {:?} and {}",
                values.shape(),
                present.len()
            )));
        }
        Ok(DimTargets { values, present })
    }

    pub fn all_present(values: Tensor) -> Result<Self> {
        let n = values.shape()[0];
        Self::new(values, vec![true; n])
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(SerError::Config(format!(
            "label smoothing epsilon must be in [0,1), got {eps}"
        )));
    }
    Ok(())
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.len() != NUM_CLASSES {
        return Err(SerError::Config(format!(
            "expected {NUM_CLASSES} class weights, got {}",
            w.len()
        )));
    }
    if let Some(bad) = w.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(SerError::Config(format!(
            "class weights must be non-negative, got {bad}"
        )));
    }
    Ok(())
}

/// `(1 − ε)·y + ε/7` row-wise.
pub fn smooth_labels(targets: &Tensor, epsilon: f64) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    if targets.rank() != 2 || targets.cols() != NUM_CLASSES {
        return Err(SerError::Validation(format!(
            "targets must be [n×{NUM_CLASSES}], got {:?}",
            targets.shape()
        )));
    }
    let k = NUM_CLASSES as f64;
    Ok(targets.map(|y| (1.0 - epsilon) * y + epsilon / k))
}

/// Inverse-frequency weights `N / (7·max(count, 1))`, rescaled to mean 1.
pub fn class_weights_from_counts(counts: &[f64]) -> Result<Vec<f64>> {
    if counts.len() != NUM_CLASSES {
        return Err(SerError::Config(format!(
            "expected {NUM_CLASSES} class counts, got {}",
            counts.len()
        )));
    }
    if counts.iter().any(|&c| !(c >= 0.0)) {
        return Err(SerError::Config("class counts must be >= 0".into()));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(SerError::Config("class counts are all zero".into()));
    }
    let k = NUM_CLASSES as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| total / (k * c.max(1.0))).collect();
    let mean = raw.iter().sum::<f64>() / k;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// `−(1/B)·Σ_b Σ_i w_i·y_bi·log(max(p_bi, 1e-12))` on the graph.
pub fn weighted_cross_entropy_graph(g: &mut Graph, probs: Var, targets: Var, weights: &[f64]) -> Result<Var> {
    check_weights(weights)?;
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES || g.shape(targets) != shape.as_slice() {
        return Err(SerError::ShapeMismatch {
            node: g.len(),
            op: "weighted_cross_entropy",
            detail: format!("probs {:?}, targets {:?}", shape, g.shape(targets)),
        });
    }
    let b = shape[0];
    let w = g.constant(Tensor::vector(weights.to_vec()))?;
    let w = g.broadcast_rows(w, b)?;
    let logp = g.clamp_min(probs, LOG_CLAMP)?;
    let logp = g.log(logp)?;
    let wy = g.mul(w, targets)?;
    let terms = g.mul(wy, logp)?;
    let s = g.sum(terms)?;
    g.scale(s, -1.0 / b as f64)
}

pub fn weighted_cross_entropy(probs: &Tensor, targets: &Tensor, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone())?;
    let t = g.constant(targets.clone())?;
    let l = weighted_cross_entropy_graph(&mut g, p, t, weights)?;
    Ok(g.value(l).item())
}

/// `2·cov / (var_y + var_ŷ + (μ_y − μ_ŷ)² + eps)` with population moments, as a `[1]` node.
pub fn ccc_graph(g: &mut Graph, y: Var, yhat: Var, eps: f64) -> Result<Var> {
    if g.shape(y) != g.shape(yhat) {
        return Err(SerError::ShapeMismatch {
            node: g.len(),
            op: "ccc",
            detail: format!("{:?} vs {:?}", g.shape(y), g.shape(yhat)),
        });
    }
    let cy = g.center(y)?;
    let ch = g.center(yhat)?;
    let prod = g.mul(cy, ch)?;
    let cov = g.mean(prod)?;
    let sy = g.square(cy)?;
    let vy = g.mean(sy)?;
    let sh = g.square(ch)?;
    let vh = g.mean(sh)?;
    let my = g.mean(y)?;
    let mh = g.mean(yhat)?;
    let dm = g.sub(my, mh)?;
    let dm2 = g.square(dm)?;
    let den = g.add(vy, vh)?;
    let den = g.add(den, dm2)?;
    let den = g.offset(den, eps)?;
    let num = g.scale(cov, 2.0)?;
    g.div(num, den)
}

/// Concordance correlation coefficient. `n = 1` yields 0.
pub fn ccc(y: &[f64], yhat: &[f64], eps: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(SerError::EmptyInput("ccc needs at least one sample".into()));
    }
    if y.len() != yhat.len() {
        return Err(SerError::Validation(format!(
            "ccc length mismatch: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(y.to_vec()))?;
    let b = g.constant(Tensor::vector(yhat.to_vec()))?;
    let c = ccc_graph(&mut g, a, b, eps)?;
    Ok(g.value(c).item())
}

/// Mean over the three dimensions of `1 − CCC`, across the present samples of the batch.
/// With fewer than two present samples the term is 0.
pub fn ccc_loss_multi_graph(g: &mut Graph, preds: Var, targets: &DimTargets, eps: f64) -> Result<Var> {
    let shape = g.shape(preds).to_vec();
    if shape != targets.values.shape() {
        return Err(SerError::ShapeMismatch {
            node: g.len(),
            op: "ccc_loss",
            detail: format!("preds {:?}, targets {:?}", shape, targets.values.shape()),
        });
    }
    let rows: Vec<usize> = (0..shape[0]).filter(|&i| targets.present[i]).collect();
    let m = rows.len();
    if m < 2 {
        log::warn!("ccc loss: {m} present dimensional targets in batch, contributing 0");
        return g.constant(Tensor::scalar(0.0));
    }
    let mut select = Tensor::zeros(&[m, shape[0]]);
    let mut tv = Vec::with_capacity(m * NUM_DIMS);
    for (r, &i) in rows.iter().enumerate() {
        select.data_mut()[r * shape[0] + i] = 1.0;
        tv.extend_from_slice(targets.values.row(i));
    }
    let sel = g.constant(select)?;
    let p = g.matmul(sel, preds)?;
    let t = g.constant(Tensor::matrix(m, NUM_DIMS, tv)?)?;
    let mut total = None;
    for d in 0..NUM_DIMS {
        let pd = g.slice(p, 1, d, 1)?;
        let td = g.slice(t, 1, d, 1)?;
        let c = ccc_graph(g, td, pd, eps)?;
        let l = g.scale(c, -1.0)?;
        let l = g.offset(l, 1.0)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    g.scale(total.expect("three dims"), 1.0 / NUM_DIMS as f64)
}

pub fn ccc_loss_multi(targets: &DimTargets, preds: &Tensor, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(preds.clone())?;
    let l = ccc_loss_multi_graph(&mut g, p, targets, eps)?;
    Ok(g.value(l).item())
}

fn check_component(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(SerError::NonFinite {
            what: format!("{name} loss component ({v})"),
        });
    }
    Ok(())
}

/// `λ_cat·ce + λ_dim·ccc_loss`.
pub fn total_loss(ce: f64, ccc_loss: f64, cfg: &LossConfig) -> Result<f64> {
    check_component("ce", ce)?;
    check_component("ccc", ccc_loss)?;
    Ok(cfg.lambda_cat * ce + cfg.lambda_dim * ccc_loss)
}

pub fn total_loss_graph(g: &mut Graph, ce: Var, ccc_loss: Var, cfg: &LossConfig) -> Result<Var> {
    check_component("ce", g.value(ce).item())?;
    check_component("ccc", g.value(ccc_loss).item())?;
    let a = g.scale(ce, cfg.lambda_cat)?;
    if cfg.lambda_dim == 0.0 {
        return Ok(a);
    }
    let b = g.scale(ccc_loss, cfg.lambda_dim)?;
    g.add(a, b)
}

/// Loss handles for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub ccc: Var,
}

/// Builds the full objective for a batch of stacked outputs
/// (`probs: [B×7]`, `dims: [B×3]`) against already-smoothed targets.
pub fn objective_graph(
    g: &mut Graph,
    probs: Var,
    dims: Var,
    cat_targets: &Tensor,
    dim_targets: &DimTargets,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let t = g.constant(cat_targets.clone())?;
    let ce = weighted_cross_entropy_graph(g, probs, t, &cfg.class_weights)?;
    let ccc = ccc_loss_multi_graph(g, dims, dim_targets, cfg.eps_ccc)?;
    let total = total_loss_graph(g, ce, ccc, cfg)?;
    Ok(LossVars { total, ce, ccc })
}

#[cfg(test)]
mod tests;
