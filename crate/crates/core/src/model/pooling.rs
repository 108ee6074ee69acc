//! Multiscale and hierarchical attention pooling.
//!
//! For each scale `s`, frames are averaged over non-overlapping windows of
//! `s` (the remainder window is kept, and `s ≥ T` collapses to one window),
//! then a shared additive attention reduces each windowed sequence to one
//! summary. A second additive attention pools the per-scale summaries.

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SerError};
use crate::model::config::PoolingConfig;
use crate::model::params::{Bound, Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn init(store: &mut ParamStore, init: &Init, prefix: &str, channels: usize, cfg: &PoolingConfig) {
    for stage in ["scale", "hier"] {
        let w = format!("{prefix}.{stage}.proj.weight");
        store.insert(
            &w,
            init.fan_in(&w, &[cfg.attention_hidden, channels], channels),
            ParamGroup::Downstream,
        );
        store.insert(
            format!("{prefix}.{stage}.proj.bias"),
            Tensor::zeros(&[cfg.attention_hidden]),
            ParamGroup::Downstream,
        );
        let v = format!("{prefix}.{stage}.score");
        store.insert(
            &v,
            init.fan_in(&v, &[cfg.attention_hidden, 1], cfg.attention_hidden),
            ParamGroup::Downstream,
        );
    }
}

/// `[n×T]` matrix whose rows average consecutive windows of `scale` frames.
pub fn window_average_matrix(frames: usize, scale: usize) -> Tensor {
    let n = frames.div_ceil(scale);
    let mut m = Tensor::zeros(&[n, frames]);
    for w in 0..n {
        let lo = w * scale;
        let hi = ((w + 1) * scale).min(frames);
        let inv = 1.0 / (hi - lo) as f64;
        for t in lo..hi {
            m.data_mut()[w * frames + t] = inv;
        }
    }
    m
}

/// Additive attention over the rows of `seq: [n×C]`: `w = softmax(tanh(seq·Pᵀ + b)·v)`,
/// returns `wᵀ·seq` as `[1×C]`.
pub fn additive_attention(g: &mut Graph, p: &Bound, prefix: &str, seq: Var) -> Result<Var> {
    let n = g.shape(seq)[0];
    let u = g.linear(
        seq,
        p.var(&format!("{prefix}.proj.weight"))?,
        Some(p.var(&format!("{prefix}.proj.bias"))?),
    )?;
    let u = g.tanh(u)?;
    let scores = g.matmul(u, p.var(&format!("{prefix}.score"))?)?;
    let scores = g.reshape(scores, &[1, n])?;
    let w = g.softmax_rows(scores)?;
    g.matmul(w, seq)
}

/// `hidden: [T×C]` → `[C]`.
pub fn multiscale_hierarchical_pool(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    hidden: Var,
    cfg: &PoolingConfig,
) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 2 {
        return Err(SerError::EmptyInput(format!("pooling expects [T×C], got {shape:?}")));
    }
    let (t, c) = (shape[0], shape[1]);
    let mut summaries = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        let seq = if s == 1 {
            hidden
        } else {
            let m = g.constant(window_average_matrix(t, s))?;
            g.matmul(m, hidden)?
        };
        summaries.push(additive_attention(g, p, &format!("{prefix}.scale"), seq)?);
    }
    let stacked = if summaries.len() == 1 {
        summaries[0]
    } else {
        g.concat(&summaries, 0)?
    };
    let pooled = additive_attention(g, p, &format!("{prefix}.hier"), stacked)?;
    g.reshape(pooled, &[c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_matrix_keeps_remainder() {
        let m = window_average_matrix(5, 2);
        assert_eq!(m.shape(), &[3, 5]);
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let whole = window_average_matrix(3, 16);
        assert_eq!(whole.shape(), &[1, 3]);
        assert!(whole.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
