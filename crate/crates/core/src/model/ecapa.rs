//! ECAPA-TDNN frame-level stack with GroupNorm in place of BatchNorm.
//!
//! Layout is channels × time throughout. Each SE-Res2Block runs
//! 1×1 conv → GN → ReLU → Res2 dilated conv → GN → ReLU → 1×1 conv → GN → SE → residual.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::config::EcapaConfig;
use crate::model::params::{Bound, Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Standard deviations below this are floored before the square root.
pub const STD_FLOOR: f64 = 1e-6;

const DS: ParamGroup = ParamGroup::Downstream;

fn conv_params(store: &mut ParamStore, init: &Init, prefix: &str, cout: usize, cin: usize, k: usize) {
    let w = format!("{prefix}.weight");
    store.insert(&w, init.fan_in(&w, &[cout, cin, k], cin * k), DS);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), DS);
}

fn norm_params(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0), DS);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), DS);
}

fn linear_params(store: &mut ParamStore, init: &Init, prefix: &str, out: usize, inp: usize) {
    let w = format!("{prefix}.weight");
    store.insert(&w, init.fan_in(&w, &[out, inp], inp), DS);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), DS);
}

pub(crate) fn init_block(store: &mut ParamStore, init: &Init, prefix: &str, cfg: &EcapaConfig) {
    let c = cfg.channels;
    let width = c / cfg.res2_scale;
    conv_params(store, init, &format!("{prefix}.conv1"), c, c, 1);
    norm_params(store, &format!("{prefix}.norm1"), c);
    for j in 1..cfg.res2_scale {
        conv_params(
            store,
            init,
            &format!("{prefix}.res2.conv{j}"),
            width,
            width,
            cfg.kernel_size,
        );
    }
    norm_params(store, &format!("{prefix}.norm2"), c);
    conv_params(store, init, &format!("{prefix}.conv3"), c, c, 1);
    norm_params(store, &format!("{prefix}.norm3"), c);
    linear_params(store, init, &format!("{prefix}.se.fc1"), cfg.se_bottleneck, c);
    linear_params(store, init, &format!("{prefix}.se.fc2"), c, cfg.se_bottleneck);
}

pub(crate) fn init_asp(store: &mut ParamStore, init: &Init, prefix: &str, channels: usize, hidden: usize) {
    conv_params(store, init, &format!("{prefix}.attn1"), hidden, channels, 1);
    conv_params(store, init, &format!("{prefix}.attn2"), channels, hidden, 1);
}

pub(crate) fn init(store: &mut ParamStore, init: &Init, cfg: &EcapaConfig, in_dim: usize) {
    let c = cfg.channels;
    conv_params(store, init, "ecapa.input.conv", c, in_dim, cfg.input_kernel);
    norm_params(store, "ecapa.input.norm", c);
    for i in 0..cfg.dilations.len() {
        init_block(store, init, &format!("ecapa.block{i}"), cfg);
    }
    let n = cfg.dilations.len();
    conv_params(store, init, "ecapa.mfa.conv", c, n * c, 1);
    norm_params(store, "ecapa.mfa.norm", c);
    init_asp(store, init, "ecapa.asp", c, cfg.attention_hidden);
}

fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.conv1d(x, w, Some(b), dilation)
}

fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var, groups: usize, eps: f64) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.group_norm(x, groups, gamma, beta, eps)
}

/// Res2 dilated convolution: chunk 0 passes through, chunk 1 is convolved,
/// chunk i ≥ 2 is convolved after adding the previous chunk's output.
pub fn res2_conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, dilation: usize, cfg: &EcapaConfig) -> Result<Var> {
    let width = cfg.channels / cfg.res2_scale;
    let mut outs: Vec<Var> = Vec::with_capacity(cfg.res2_scale);
    for j in 0..cfg.res2_scale {
        let chunk = g.slice(x, 0, j * width, width)?;
        let y = match j {
            0 => chunk,
            1 => conv(g, p, &format!("{prefix}.res2.conv{j}"), chunk, dilation)?,
            _ => {
                let inp = g.add(chunk, outs[j - 1])?;
                conv(g, p, &format!("{prefix}.res2.conv{j}"), inp, dilation)?
            }
        };
        outs.push(y);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 0)
}

/// Squeeze-excitation: channel gates from the time-averaged input.
fn squeeze_excite(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (c, t) = (g.shape(x)[0], g.shape(x)[1]);
    let s = g.sum_axis(x, 1)?;
    let s = g.scale(s, 1.0 / t as f64)?;
    let s = g.reshape(s, &[1, c])?;
    let z = g.linear(
        s,
        p.var(&format!("{prefix}.fc1.weight"))?,
        Some(p.var(&format!("{prefix}.fc1.bias"))?),
    )?;
    let z = g.relu(z)?;
    let z = g.linear(
        z,
        p.var(&format!("{prefix}.fc2.weight"))?,
        Some(p.var(&format!("{prefix}.fc2.bias"))?),
    )?;
    let gate = g.sigmoid(z)?;
    let gate = g.reshape(gate, &[c])?;
    let gate = g.broadcast_cols(gate, t)?;
    g.mul(x, gate)
}

/// One SE-Res2Block over `x: [C×T]`; preserves shape.
pub fn se_res2_block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    dilation: usize,
    cfg: &EcapaConfig,
    eps: f64,
) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}.conv1"), x, 1)?;
    let h = norm(g, p, &format!("{prefix}.norm1"), h, cfg.groups, eps)?;
    let h = g.relu(h)?;
    let h = res2_conv(g, p, prefix, h, dilation, cfg)?;
    let h = norm(g, p, &format!("{prefix}.norm2"), h, cfg.groups, eps)?;
    let h = g.relu(h)?;
    let h = conv(g, p, &format!("{prefix}.conv3"), h, 1)?;
    let h = norm(g, p, &format!("{prefix}.norm3"), h, cfg.groups, eps)?;
    let h = squeeze_excite(g, p, &format!("{prefix}.se"), h)?;
    g.add(h, x)
}

/// Attention-weighted mean and standard deviation per channel.
/// `logits: [C×T]` are softmaxed over time per channel. Returns `[2C]`.
pub fn weighted_mean_std(g: &mut Graph, x: Var, logits: Var) -> Result<Var> {
    let t = g.shape(x)[1];
    let alpha = g.softmax_rows(logits)?;
    let ax = g.mul(alpha, x)?;
    let mean = g.sum_axis(ax, 1)?;
    let mb = g.broadcast_cols(mean, t)?;
    let dev = g.sub(x, mb)?;
    let sq = g.square(dev)?;
    let wsq = g.mul(alpha, sq)?;
    let var = g.sum_axis(wsq, 1)?;
    let var = g.clamp_min(var, STD_FLOOR * STD_FLOOR)?;
    let std = g.sqrt(var)?;
    g.concat(&[mean, std], 0)
}

/// Attentive statistics pooling: `[C×T]` → `[2C]`.
pub fn attentive_stats_pool(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}.attn1"), x, 1)?;
    let h = g.tanh(h)?;
    let logits = conv(g, p, &format!("{prefix}.attn2"), h, 1)?;
    weighted_mean_std(g, x, logits)
}

/// Encoder states `[T×d]` → frame-level features `[C×T]` after multi-layer aggregation.
pub(crate) fn frame_features(g: &mut Graph, p: &Bound, cfg: &EcapaConfig, hidden: Var, eps: f64) -> Result<Var> {
    let x = g.transpose(hidden)?;
    let h = conv(g, p, "ecapa.input.conv", x, 1)?;
    let h = norm(g, p, "ecapa.input.norm", h, cfg.groups, eps)?;
    let mut h = g.relu(h)?;
    let mut outs = Vec::with_capacity(cfg.dilations.len());
    for (i, &d) in cfg.dilations.iter().enumerate() {
        h = se_res2_block(g, p, &format!("ecapa.block{i}"), h, d, cfg, eps)?;
        outs.push(h);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
    let f = conv(g, p, "ecapa.mfa.conv", cat, 1)?;
    let f = norm(g, p, "ecapa.mfa.norm", f, cfg.groups, eps)?;
    g.relu(f)
}
