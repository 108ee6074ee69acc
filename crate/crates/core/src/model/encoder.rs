//! Frozen pre-norm self-attention encoder with LoRA on q/k/v.
//!
//! There is no positional encoding: the encoder is permutation-equivariant
//! over frames, so temporal order only enters through the downstream convolutions.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::config::{EncoderStubConfig, LoraConfig};
use crate::model::lora::{projection, LoraTarget};
use crate::model::params::{Bound, Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn init(store: &mut ParamStore, cfg: &EncoderStubConfig, lora: Option<&LoraConfig>, init: &Init) {
    let d = cfg.model_dim;
    let frozen = ParamGroup::Frozen;
    store.insert(
        "encoder.input.weight",
        init.fan_in("encoder.input.weight", &[d, cfg.input_dim], cfg.input_dim),
        frozen,
    );
    store.insert("encoder.input.bias", Tensor::zeros(&[d]), frozen);
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layer{l}");
        layer_norm_params(store, &format!("{p}.ln1"), d);
        for name in ["q", "k", "v", "o"] {
            let w = format!("{p}.attn.{name}.weight");
            store.insert(&w, init.fan_in(&w, &[d, d], d), frozen);
            store.insert(format!("{p}.attn.{name}.bias"), Tensor::zeros(&[d]), frozen);
        }
        if let Some(lora) = lora {
            for t in LoraTarget::ALL {
                let a = format!("{p}.attn.{}.lora.A", t.short());
                store.insert(&a, init.normal(&a, &[lora.rank, d], 0.02), ParamGroup::Backbone);
                store.insert(
                    format!("{p}.attn.{}.lora.B", t.short()),
                    Tensor::zeros(&[d, lora.rank]),
                    ParamGroup::Backbone,
                );
            }
        }
        layer_norm_params(store, &format!("{p}.ln2"), d);
        let w1 = format!("{p}.ff1.weight");
        store.insert(&w1, init.fan_in(&w1, &[cfg.ff_dim, d], d), frozen);
        store.insert(format!("{p}.ff1.bias"), Tensor::zeros(&[cfg.ff_dim]), frozen);
        let w2 = format!("{p}.ff2.weight");
        store.insert(&w2, init.fan_in(&w2, &[d, cfg.ff_dim], cfg.ff_dim), frozen);
        store.insert(format!("{p}.ff2.bias"), Tensor::zeros(&[d]), frozen);
    }
    layer_norm_params(store, "encoder.ln_post", d);
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0), ParamGroup::Frozen);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), ParamGroup::Frozen);
}

fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// `features: [T×input_dim]` → hidden states `[T×model_dim]`.
pub(crate) fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderStubConfig,
    lora: Option<&LoraConfig>,
    features: Var,
    eps: f64,
) -> Result<Var> {
    let h = g.linear(
        features,
        p.var("encoder.input.weight")?,
        Some(p.var("encoder.input.bias")?),
    )?;
    forward_from_layer(g, p, cfg, lora, h, 0, eps)
}

/// Runs layers `start..` on `h`, the residual stream entering layer `start`,
/// then the output norm.
pub(crate) fn forward_from_layer(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderStubConfig,
    lora: Option<&LoraConfig>,
    mut h: Var,
    start: usize,
    eps: f64,
) -> Result<Var> {
    for l in start..cfg.num_layers {
        h = layer(g, p, cfg, lora, l, h, eps)?;
    }
    layer_norm(g, p, "encoder.ln_post", h, eps)
}

/// Residual stream entering each layer, `[T×model_dim]` per layer.
pub(crate) fn layer_inputs(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderStubConfig,
    lora: Option<&LoraConfig>,
    features: Var,
    eps: f64,
) -> Result<Vec<Var>> {
    let mut h = g.linear(
        features,
        p.var("encoder.input.weight")?,
        Some(p.var("encoder.input.bias")?),
    )?;
    let mut out = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        out.push(h);
        h = layer(g, p, cfg, lora, l, h, eps)?;
    }
    Ok(out)
}

/// One pre-norm block: `h + attn(ln1(h))`, then `+ ff(ln2(·))`.
fn layer(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderStubConfig,
    lora: Option<&LoraConfig>,
    l: usize,
    h: Var,
    eps: f64,
) -> Result<Var> {
    let pre = format!("encoder.layer{l}");
    let x = layer_norm(g, p, &format!("{pre}.ln1"), h, eps)?;
    let attn = self_attention(g, p, &pre, cfg, x, lora.map(LoraConfig::scaling))?;
    let h = g.add(h, attn)?;

    let x = layer_norm(g, p, &format!("{pre}.ln2"), h, eps)?;
    let f = g.linear(
        x,
        p.var(&format!("{pre}.ff1.weight"))?,
        Some(p.var(&format!("{pre}.ff1.bias"))?),
    )?;
    let f = g.gelu(f)?;
    let f = g.linear(
        f,
        p.var(&format!("{pre}.ff2.weight"))?,
        Some(p.var(&format!("{pre}.ff2.bias"))?),
    )?;
    g.add(h, f)
}

fn self_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &EncoderStubConfig,
    x: Var,
    scaling: Option<f64>,
) -> Result<Var> {
    let q = projection(g, p, &format!("{prefix}.attn.q"), x, scaling)?;
    let k = projection(g, p, &format!("{prefix}.attn.k"), x, scaling)?;
    let v = projection(g, p, &format!("{prefix}.attn.v"), x, scaling)?;
    let dh = cfg.model_dim / cfg.num_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat(&heads, 1)?;
    projection(g, p, &format!("{prefix}.attn.o"), ctx, None)
}
