//! The emotion network: frozen encoder stub with LoRA adapters, ECAPA-TDNN
//! frame-level blocks, attentive-statistics and multiscale attention pooling,
//! and two output heads (7-way softmax, 3-way sigmoid).
//!
//! Parameter names are dotted paths (`encoder.layer0.attn.q.lora.A`,
//! `ecapa.block1.norm2.gamma`, `head.cat.weight`) and are part of the
//! checkpoint format.

mod config;
pub mod ecapa;
mod encoder;
mod labels;
mod lora;
mod params;
pub mod pooling;

pub use config::{EcapaConfig, EncoderStubConfig, LoraConfig, ModelConfig, PoolingConfig};
pub use labels::{EmotionLabel, NUM_CLASSES};
pub use lora::{lora_merge, LoraAdapter, LoraTarget};
pub use params::{Bound, Param, ParamGroup, ParamStore};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SerError};
use crate::tensor::Tensor;
use params::Init;

pub const NUM_DIMS: usize = 3;

/// Arousal, valence, dominance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimScores {
    pub arousal: f64,
    pub valence: f64,
    pub dominance: f64,
}

impl DimScores {
    pub fn from_slice(v: &[f64]) -> Self {
        DimScores {
            arousal: v[0],
            valence: v[1],
            dominance: v[2],
        }
    }

    pub fn to_array(self) -> [f64; NUM_DIMS] {
        [self.arousal, self.valence, self.dominance]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub cat_logits: Tensor,
    pub cat_probs: Tensor,
    pub dims: DimScores,
}

impl ModelOutput {
    pub fn predicted(&self) -> EmotionLabel {
        EmotionLabel::from_index(argmax(self.cat_probs.data())).expect("7 classes")
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Graph handles for one utterance's outputs (`[1×7]`, `[1×7]`, `[1×3]`).
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub logits: Var,
    pub probs: Var,
    pub dims: Var,
}

fn stack_outputs(g: &mut Graph, outs: Vec<OutputVars>) -> Result<OutputVars> {
    match outs.len() {
        0 => Err(SerError::EmptyInput("empty batch".into())),
        1 => Ok(outs[0]),
        _ => {
            let stack = |g: &mut Graph, f: fn(&OutputVars) -> Var| {
                let parts: Vec<Var> = outs.iter().map(f).collect();
                g.concat(&parts, 0)
            };
            Ok(OutputVars {
                logits: stack(g, |o| o.logits)?,
                probs: stack(g, |o| o.probs)?,
                dims: stack(g, |o| o.dims)?,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let init = Init { seed: cfg.seed };
        let mut params = ParamStore::new();
        encoder::init(&mut params, &cfg.encoder, cfg.lora.as_ref(), &init);
        ecapa::init(&mut params, &init, &cfg.ecapa, cfg.encoder.model_dim);
        pooling::init(&mut params, &init, "pool", cfg.ecapa.channels, &cfg.pooling);
        let c = cfg.ecapa.channels;
        let e = cfg.embed_dim;
        let ds = ParamGroup::Downstream;
        params.insert(
            "head.embed.weight",
            init.fan_in("head.embed.weight", &[e, 3 * c], 3 * c),
            ds,
        );
        params.insert("head.embed.bias", Tensor::zeros(&[e]), ds);
        params.insert(
            "head.cat.weight",
            init.fan_in("head.cat.weight", &[NUM_CLASSES, e], e),
            ds,
        );
        params.insert("head.cat.bias", Tensor::zeros(&[NUM_CLASSES]), ds);
        params.insert("head.dim.weight", init.fan_in("head.dim.weight", &[NUM_DIMS, e], e), ds);
        params.insert("head.dim.bias", Tensor::zeros(&[NUM_DIMS]), ds);
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] == 0 {
            return Err(SerError::EmptyInput(format!(
                "features must be [T×D] with T ≥ 1, got {shape:?}"
            )));
        }
        if shape[1] != self.cfg.encoder.input_dim {
            return Err(SerError::Config(format!(
                "feature dim {} does not match encoder input_dim {}",
                shape[1], self.cfg.encoder.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder hidden states for `features: [T×D]` on an existing graph.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        self.check_features(g.shape(features))?;
        encoder::forward(
            g,
            p,
            &self.cfg.encoder,
            self.cfg.lora.as_ref(),
            features,
            self.cfg.norm_eps,
        )
    }

    /// Full forward pass for one utterance.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<OutputVars> {
        let hidden = self.encode_graph(g, p, features)?;
        self.forward_from_hidden(g, p, hidden)
    }

    /// Everything downstream of the encoder, from hidden states `[T×model_dim]`.
    pub fn forward_from_hidden(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<OutputVars> {
        let frames = ecapa::frame_features(g, p, &self.cfg.ecapa, hidden, self.cfg.norm_eps)?;
        let stats = ecapa::attentive_stats_pool(g, p, "ecapa.asp", frames)?;
        let ft = g.transpose(frames)?;
        let ms = pooling::multiscale_hierarchical_pool(g, p, "pool", ft, &self.cfg.pooling)?;
        let z = g.concat(&[stats, ms], 0)?;
        let width = g.shape(z)[0];
        let z = g.reshape(z, &[1, width])?;
        let z = g.linear(z, p.var("head.embed.weight")?, Some(p.var("head.embed.bias")?))?;
        let z = g.tanh(z)?;
        let logits = g.linear(z, p.var("head.cat.weight")?, Some(p.var("head.cat.bias")?))?;
        let probs = g.softmax_rows(logits)?;
        let d = g.linear(z, p.var("head.dim.weight")?, Some(p.var("head.dim.bias")?))?;
        let dims = g.sigmoid(d)?;
        Ok(OutputVars { logits, probs, dims })
    }

    /// Runs every utterance of a batch on one graph and stacks the outputs
    /// into `[B×7]` logits/probs and `[B×3]` dims.
    pub fn forward_batch(&self, g: &mut Graph, p: &Bound, batch: &[Tensor]) -> Result<OutputVars> {
        let mut outs = Vec::with_capacity(batch.len());
        for x in batch {
            self.check_features(x.shape())?;
            let xv = g.constant(x.clone())?;
            outs.push(self.forward(g, p, xv)?);
        }
        stack_outputs(g, outs)
    }

    /// Like [`Model::forward_batch`] but starting from precomputed encoder states.
    pub fn forward_batch_from_hidden(&self, g: &mut Graph, p: &Bound, hidden: &[Tensor]) -> Result<OutputVars> {
        let mut outs = Vec::with_capacity(hidden.len());
        for h in hidden {
            let hv = g.constant(h.clone())?;
            outs.push(self.forward_from_hidden(g, p, hv)?);
        }
        stack_outputs(g, outs)
    }

    /// Residual stream entering each encoder layer, for resuming with
    /// [`Model::forward_batch_from_layer`].
    pub(crate) fn layer_inputs(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        self.check_features(features.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = g.constant(features.clone())?;
        let hs = encoder::layer_inputs(
            &mut g,
            &p,
            &self.cfg.encoder,
            self.cfg.lora.as_ref(),
            x,
            self.cfg.norm_eps,
        )?;
        Ok(hs.into_iter().map(|h| g.value(h).clone()).collect())
    }

    /// Full forward pass resumed at encoder layer `start`; `inputs` holds each
    /// utterance's residual stream entering that layer.
    pub(crate) fn forward_batch_from_layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        start: usize,
        inputs: &[Tensor],
    ) -> Result<OutputVars> {
        let mut outs = Vec::with_capacity(inputs.len());
        for h in inputs {
            let hv = g.constant(h.clone())?;
            let hidden = encoder::forward_from_layer(
                g,
                p,
                &self.cfg.encoder,
                self.cfg.lora.as_ref(),
                hv,
                start,
                self.cfg.norm_eps,
            )?;
            outs.push(self.forward_from_hidden(g, p, hidden)?);
        }
        stack_outputs(g, outs)
    }

    /// Inference on one feature matrix.
    pub fn predict(&self, features: &Tensor) -> Result<ModelOutput> {
        self.check_features(features.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = g.constant(features.clone())?;
        let out = self.forward(&mut g, &p, x)?;
        Ok(ModelOutput {
            cat_logits: g.value(out.logits).clone().reshaped(&[NUM_CLASSES])?,
            cat_probs: g.value(out.probs).clone().reshaped(&[NUM_CLASSES])?,
            dims: DimScores::from_slice(g.value(out.dims).data()),
        })
    }

    /// Encoder output only, `[T×model_dim]`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = g.constant(features.clone())?;
        let h = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(h).clone())
    }

    /// All LoRA adapters, keyed by the projection prefix they attach to.
    pub fn adapters(&self) -> Result<Vec<(String, LoraAdapter)>> {
        let Some(lora) = &self.cfg.lora else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for l in 0..self.cfg.encoder.num_layers {
            for t in LoraTarget::ALL {
                let prefix = format!("encoder.layer{l}.attn.{}", t.short());
                let ad = LoraAdapter::from_store(&self.params, &prefix, lora.alpha, t)?;
                out.push((prefix, ad));
            }
        }
        Ok(out)
    }

    /// Same network with every adapter folded into its base weight and removed.
    pub fn merged(&self) -> Result<Model> {
        let mut merged = self.without_adapters();
        for (prefix, ad) in self.adapters()? {
            let wname = format!("{prefix}.weight");
            let w = lora_merge(self.params.tensor(&wname)?, &ad)?;
            merged.params.get_mut(&wname)?.value = w;
        }
        Ok(merged)
    }

    /// Drops the adapters without merging them.
    pub fn without_adapters(&self) -> Model {
        let mut cfg = self.cfg.clone();
        cfg.lora = None;
        let mut params = self.params.clone();
        let names: Vec<String> = params
            .iter()
            .filter(|(n, _)| n.contains(".lora."))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            params.remove(&n);
        }
        Model { cfg, params }
    }

    /// Snapshot of all tensors, in parameter order.
    pub fn state(&self) -> IndexMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect()
    }

    /// Replaces every tensor from `tensors`. Names and shapes must match exactly.
    pub fn load_state(&mut self, tensors: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, p) in self.params.iter() {
            let Some(t) = tensors.get(name) else {
                return Err(SerError::Incompatible {
                    tensor: name.to_string(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if t.shape() != p.value.shape() {
                return Err(SerError::Incompatible {
                    tensor: name.to_string(),
                    detail: format!("shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !self.params.contains(k)) {
            return Err(SerError::Incompatible {
                tensor: extra.clone(),
                detail: "not a parameter of this model".into(),
            });
        }
        for (name, p) in self.params.iter_mut() {
            p.value = tensors[name].clone();
        }
        Ok(())
    }
}
