//! Named parameter storage.

use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SerError};
use crate::rng;
use crate::tensor::Tensor;

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder base weights. Never receive gradients.
    Frozen,
    /// LoRA adapters on the frozen encoder.
    Backbone,
    /// Everything after the encoder.
    Downstream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.group != ParamGroup::Frozen
    }
}

/// Insertion-ordered map of dotted parameter names to tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| SerError::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| SerError::Config(format!("missing parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn num_elements(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Puts every parameter on `graph` as a leaf; only trainable ones require grad.
    pub fn bind(&self, graph: &mut Graph) -> Result<Bound> {
        self.bind_where(graph, |_| true)
    }

    /// Like [`ParamStore::bind`], restricted to names accepted by `keep`.
    pub fn bind_where(&self, graph: &mut Graph, keep: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, p) in self.params.iter().filter(|(n, _)| keep(n)) {
            vars.insert(name.clone(), graph.leaf(p.value.clone(), p.trainable())?);
        }
        Ok(Bound { vars })
    }
}

/// Parameter handles on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SerError::Config(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Seeded initializers. Each tensor draws from its own stream keyed by name.
pub(crate) struct Init {
    pub seed: u64,
}

impl Init {
    /// Gaussian with std `1/sqrt(fan_in)`.
    pub fn fan_in(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut r = rng::stream(self.seed, name);
        Tensor::randn(shape, std, &mut r)
    }
}
