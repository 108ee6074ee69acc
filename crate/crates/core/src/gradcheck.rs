//! End-to-end gradient verification of the training objective on a small
//! seeded model: every trainable element's analytic gradient is compared with
//! central finite differences.

use rand::Rng;

use crate::autodiff::{relative_error, Graph};
use crate::error::{Result, SerError};
use crate::losses::{objective_graph, smooth_labels, DimTargets, LossConfig};
use crate::model::{Model, ModelConfig, NUM_CLASSES, NUM_DIMS};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub batch: usize,
    pub frames: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            batch: 2,
            frames: 12,
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub module: &'static str,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSummary {
    pub module: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// One row per module, in first-seen parameter order.
    pub fn by_module(&self) -> Vec<ModuleSummary> {
        let mut out: Vec<ModuleSummary> = Vec::new();
        for p in &self.params {
            match out.iter_mut().find(|m| m.module == p.module) {
                Some(m) => {
                    m.params += 1;
                    if p.max_rel_err > m.max_rel_err {
                        m.max_rel_err = p.max_rel_err;
                        m.worst_param = p.name.clone();
                    }
                }
                None => out.push(ModuleSummary {
                    module: p.module,
                    max_rel_err: p.max_rel_err,
                    worst_param: p.name.clone(),
                    params: 1,
                }),
            }
        }
        out
    }
}

/// Module a parameter belongs to, for reporting.
pub fn module_of(name: &str) -> &'static str {
    if name.contains(".lora.") {
        return "lora";
    }
    match name.split('.').next() {
        Some("encoder") => "encoder",
        Some("ecapa") => "ecapa",
        Some("pool") => "pooling",
        Some("head") => "heads",
        _ => "other",
    }
}

/// A seeded small model with non-zero LoRA `B` (so `A` has a gradient), plus
/// a random batch with smoothed targets and random class weights.
pub struct Problem {
    pub model: Model,
    pub batch: Vec<Tensor>,
    pub cat_targets: Tensor,
    pub dim_targets: DimTargets,
    pub loss: LossConfig,
}

impl Problem {
    pub fn new(opts: &GradcheckOptions) -> Result<Self> {
        let mut model = Model::new(ModelConfig::small(opts.seed))?;
        let mut rng = stream(opts.seed, "gradcheck");
        for (name, p) in model.params_mut().iter_mut() {
            if name.ends_with(".lora.B") {
                p.value = Tensor::randn(p.value.shape(), 0.05, &mut rng);
            }
        }
        let d = model.config().encoder.input_dim;
        let batch = (0..opts.batch)
            .map(|_| Tensor::uniform(&[opts.frames, d], -1.0, 1.0, &mut rng))
            .collect();
        let mut onehot = Tensor::zeros(&[opts.batch, NUM_CLASSES]);
        for b in 0..opts.batch {
            let c = rng.random_range(0..NUM_CLASSES);
            onehot.data_mut()[b * NUM_CLASSES + c] = 1.0;
        }
        let loss = LossConfig {
            class_weights: (0..NUM_CLASSES).map(|_| rng.random_range(0.5..1.5)).collect(),
            ..LossConfig::default()
        };
        let cat_targets = smooth_labels(&onehot, loss.epsilon_smooth)?;
        let dim_targets = DimTargets::all_present(Tensor::uniform(&[opts.batch, NUM_DIMS], 0.0, 1.0, &mut rng))?;
        Ok(Problem {
            model,
            batch,
            cat_targets,
            dim_targets,
            loss,
        })
    }

    /// Encoder states of the batch, for perturbations that cannot reach the encoder.
    pub fn hidden(&self, model: &Model) -> Result<Vec<Tensor>> {
        self.batch.iter().map(|x| model.encode(x)).collect()
    }

    /// Total loss and, when `grads` is set, its gradient for every trainable parameter.
    pub fn evaluate(&self, model: &Model, grads: bool) -> Result<(f64, Vec<(String, Tensor)>)> {
        self.evaluate_with(model, Cached::None, grads)
    }

    /// Residual streams entering each encoder layer, indexed `[layer][utterance]`.
    fn layer_inputs(&self, model: &Model) -> Result<Vec<Vec<Tensor>>> {
        let mut out = vec![Vec::with_capacity(self.batch.len()); model.config().encoder.num_layers];
        for x in &self.batch {
            for (l, h) in model.layer_inputs(x)?.into_iter().enumerate() {
                out[l].push(h);
            }
        }
        Ok(out)
    }

    fn evaluate_with(&self, model: &Model, cached: Cached<'_>, grads: bool) -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut g = Graph::new();
        // Only bind what the resumed pass reads.
        let p = match cached {
            Cached::None => model.params().bind(&mut g)?,
            Cached::Hidden(_) => model.params().bind_where(&mut g, |n| !n.starts_with("encoder."))?,
            Cached::Layer(start, _) => model.params().bind_where(&mut g, |n| {
                !(n.starts_with("encoder.input.") || layer_of(n).is_some_and(|l| l < start))
            })?,
        };
        let out = match cached {
            Cached::None => model.forward_batch(&mut g, &p, &self.batch)?,
            Cached::Hidden(h) => model.forward_batch_from_hidden(&mut g, &p, h)?,
            Cached::Layer(start, h) => model.forward_batch_from_layer(&mut g, &p, start, h)?,
        };
        let l = objective_graph(
            &mut g,
            out.probs,
            out.dims,
            &self.cat_targets,
            &self.dim_targets,
            &self.loss,
        )?;
        let value = g.value(l.total).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(l.total)?;
        let mut named = Vec::new();
        for (name, v) in p.iter() {
            if model.params().get(name)?.trainable() {
                let t = gr.get(&g, v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                named.push((name.to_string(), t));
            }
        }
        Ok((value, named))
    }
}

/// Activations reused across finite-difference evaluations.
#[derive(Clone, Copy)]
enum Cached<'a> {
    None,
    /// Encoder output, for parameters downstream of the encoder.
    Hidden(&'a [Tensor]),
    /// Input to encoder layer `L`, for parameters inside layer `L` or later.
    Layer(usize, &'a [Tensor]),
}

/// Encoder layer index of a parameter name like `encoder.layer1.attn.q.weight`.
fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("encoder.layer")?.split('.').next()?.parse().ok()
}

/// Compares analytic and central-difference gradients for every trainable element.
pub fn check_model(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) {
        return Err(SerError::Config(format!(
            "finite-difference step must be > 0, got {}",
            opts.step
        )));
    }
    let problem = Problem::new(opts)?;
    let (loss, analytic) = problem.evaluate(&problem.model, true)?;
    let hidden = problem.hidden(&problem.model)?;
    let layers = problem.layer_inputs(&problem.model)?;
    let mut probe = problem.model.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let cached = match layer_of(&name) {
            Some(l) => Cached::Layer(l, &layers[l]),
            None if name.starts_with("encoder.") => Cached::None,
            None => Cached::Hidden(&hidden),
        };
        let mut worst = (0.0f64, 0usize);
        for i in 0..grad.len() {
            let orig = probe.params().tensor(&name)?.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.params_mut().get_mut(&name)?.value.data_mut()[i] = v;
                Ok(problem.evaluate_with(&probe, cached, false)?.0)
            };
            let plus = at(orig + opts.step)?;
            let minus = at(orig - opts.step)?;
            probe.params_mut().get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad.data()[i], numeric, opts.floor);
            if err > worst.0 || i == 0 {
                worst = (err, i);
            }
        }
        params.push(ParamCheck {
            module: module_of(&name),
            elements: grad.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            name,
        });
    }
    Ok(GradcheckReport { loss, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names() {
        assert_eq!(module_of("encoder.layer0.attn.q.lora.A"), "lora");
        assert_eq!(module_of("encoder.layer0.attn.q.weight"), "encoder");
        assert_eq!(module_of("pool.hier.score"), "pooling");
        assert_eq!(module_of("head.cat.bias"), "heads");
        assert_eq!(module_of("ecapa.block0.se.fc1.weight"), "ecapa");
    }

    #[test]
    fn layer_indices() {
        assert_eq!(layer_of("encoder.layer1.attn.q.lora.A"), Some(1));
        assert_eq!(layer_of("encoder.layer12.ln1.gamma"), Some(12));
        assert_eq!(layer_of("encoder.input.weight"), None);
        assert_eq!(layer_of("head.cat.bias"), None);
    }

    #[test]
    fn cached_evaluations_match_full_pass() {
        let problem = Problem::new(&GradcheckOptions::default()).unwrap();
        let m = &problem.model;
        let full = problem.evaluate(m, false).unwrap().0;
        let hidden = problem.hidden(m).unwrap();
        assert!((problem.evaluate_with(m, Cached::Hidden(&hidden), false).unwrap().0 - full).abs() < 1e-12);
        for (l, h) in problem.layer_inputs(m).unwrap().iter().enumerate() {
            let v = problem.evaluate_with(m, Cached::Layer(l, h), false).unwrap().0;
            assert!((v - full).abs() < 1e-12, "layer {l}: {v} vs {full}");
        }
    }

    #[test]
    fn small_model_gradients_agree() {
        let opts = GradcheckOptions {
            seed: 1,
            frames: 5,
            ..GradcheckOptions::default()
        };
        let report = check_model(&opts).unwrap();
        let modules: Vec<_> = report.by_module().iter().map(|m| m.module).collect();
        assert_eq!(modules, ["lora", "ecapa", "pooling", "heads"]);
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }
}
