//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its forward
//! value plus whatever state its local gradient needs. [`Graph::backward`]
//! sweeps the tape once in reverse. Leaves created with `requires_grad =
//! false` never receive gradients, which is how frozen weights stay frozen.
//!
//! ```
//! use ser_core::autodiff::Graph;
//! use ser_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item(), 14.0);
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;

use std::collections::BTreeMap;

pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Result, SerError};
use crate::tensor::Tensor;

/// Builds a graph over named inputs with `build`, runs backward from its
/// scalar output, and returns the value with `d(value)/d(input)` for every
/// input bound with `requires_grad = true`.
pub fn forward_backward<F>(inputs: &[(&str, &Tensor, bool)], build: F) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: FnOnce(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut graph = Graph::new();
    let mut vars = BTreeMap::new();
    for &(name, value, requires_grad) in inputs {
        let v = graph.leaf(value.clone(), requires_grad)?;
        if vars.insert(name.to_string(), v).is_some() {
            return Err(SerError::Validation(format!("input '{name}' bound twice")));
        }
    }
    let out = build(&mut graph, &vars)?;
    let value = graph.value(out);
    if value.len() != 1 {
        return Err(SerError::ShapeMismatch {
            node: out.id(),
            op: "output",
            detail: format!("scalar output required, got {:?}", value.shape()),
        });
    }
    let value = value.item();
    let grads = graph.backward(out)?;
    let mut named = BTreeMap::new();
    for &(name, _, requires_grad) in inputs {
        if !requires_grad {
            continue;
        }
        let v = vars[name];
        let g = grads.get(&graph, v).unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
        named.insert(name.to_string(), g);
    }
    Ok((value, named))
}

#[cfg(test)]
mod tests;
