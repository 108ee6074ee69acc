//! Python module `ser_py`.
//!
//! Features are passed as nested lists (or 2-D numpy arrays) of shape
//! `[frames, dims]`. Labels are lowercase names such as `"angry"`.
//! Failures raise `ConfigError`, `DataError` or `NumericError`, all
//! subclasses of `SerError`.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use ser_core::checkpoint::Checkpoint;
use ser_core::config::{Granularity, RunConfig};
use ser_core::datapipe::pseudo::{consensus_label, RawLabel};
use ser_core::datapipe::synth::{synth_dataset, SynthConfig};
use ser_core::datapipe::{Dataset, Split};
use ser_core::error::ErrorKind;
use ser_core::evaluation::{self, evaluate_dataset, load_ensemble};
use ser_core::gradcheck::{check_model, GradcheckOptions};
use ser_core::model::{self, EmotionLabel, ModelConfig, ParamGroup};
use ser_core::training::{self, train_loop};
use ser_core::Tensor;

create_exception!(ser_py, SerError, PyException);
create_exception!(ser_py, ConfigError, SerError);
create_exception!(ser_py, DataError, SerError);
create_exception!(ser_py, NumericError, SerError);

fn to_py(e: ser_core::SerError) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Config => ConfigError::new_err(msg),
        ErrorKind::Data => DataError::new_err(msg),
        ErrorKind::Numeric => NumericError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ser_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).py_err()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn label(s: &str) -> PyResult<EmotionLabel> {
    s.parse().py_err()
}

fn run_config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    match config_toml {
        Some(t) => RunConfig::from_toml(t).py_err(),
        None => Ok(RunConfig::default()),
    }
}

/// One utterance's outputs.
#[pyclass(frozen, get_all, skip_from_py_object, module = "ser_py")]
#[derive(Clone)]
struct Prediction {
    label: String,
    probs: Vec<f64>,
    logits: Vec<f64>,
    /// Arousal, valence, dominance in [0, 1].
    dims: (f64, f64, f64),
}

#[pymethods]
impl Prediction {
    fn __repr__(&self) -> String {
        format!("Prediction(label='{}', dims={:?})", self.label, self.dims)
    }
}

impl From<model::ModelOutput> for Prediction {
    fn from(o: model::ModelOutput) -> Self {
        Prediction {
            label: o.predicted().name().to_string(),
            probs: o.cat_probs.data().to_vec(),
            logits: o.cat_logits.data().to_vec(),
            dims: (o.dims.arousal, o.dims.valence, o.dims.dominance),
        }
    }
}

/// The emotion network.
#[pyclass(module = "ser_py")]
struct Model {
    inner: model::Model,
}

#[pymethods]
impl Model {
    /// Fresh model. `config_toml` is the `[model]` table of a run config.
    #[new]
    #[pyo3(signature = (config_toml=None, seed=None))]
    fn new(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = run_config(config_toml)?.model;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Model {
            inner: model::Model::new(cfg).py_err()?,
        })
    }

    /// Small network used by gradient checks.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn small(seed: u64) -> PyResult<Self> {
        Ok(Model {
            inner: model::Model::new(ModelConfig::small(seed)).py_err()?,
        })
    }

    /// Loads a checkpoint into the architecture of `config_toml` (a run config).
    #[staticmethod]
    #[pyo3(signature = (path, config_toml=None))]
    fn load(path: PathBuf, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config_toml)?.model;
        let inner = Checkpoint::load(&path).py_err()?.to_model(&cfg).py_err()?;
        Ok(Model { inner })
    }

    #[pyo3(signature = (path, epoch=0, global_step=0, dev_cat_loss=f64::NAN))]
    fn save(&self, path: PathBuf, epoch: u32, global_step: u64, dev_cat_loss: f64) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, epoch, global_step, dev_cat_loss)
            .save(&path)
            .py_err()
    }

    fn predict(&self, py: Python<'_>, features: Vec<Vec<f64>>) -> PyResult<Prediction> {
        let x = tensor(&features)?;
        py.detach(|| self.inner.predict(&x)).py_err().map(Prediction::from)
    }

    /// Encoder hidden states, `[frames, model_dim]`.
    fn encode(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&tensor(&features)?).py_err()?))
    }

    /// Copy with every LoRA adapter folded into its base weight.
    fn merged(&self) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.merged().py_err()?,
        })
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(n, _)| n.to_string()).collect()
    }

    fn trainable_parameter_names(&self) -> Vec<String> {
        self.inner.params().trainable_names()
    }

    /// Element counts per group: frozen, backbone (LoRA), downstream.
    fn parameter_counts(&self) -> (usize, usize, usize) {
        let p = self.inner.params();
        (
            p.num_elements(ParamGroup::Frozen),
            p.num_elements(ParamGroup::Backbone),
            p.num_elements(ParamGroup::Downstream),
        )
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.params().tensor(name).py_err()?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

/// 7x7 confusion counts, rows are references.
#[pyclass(module = "ser_py")]
#[derive(Default)]
struct ConfusionMatrix {
    inner: evaluation::ConfusionMatrix,
}

#[pymethods]
impl ConfusionMatrix {
    #[new]
    fn new() -> Self {
        ConfusionMatrix::default()
    }

    fn accumulate(&mut self, reference: &str, hypothesis: &str) -> PyResult<()> {
        self.inner.accumulate(label(reference)?, label(hypothesis)?);
        Ok(())
    }

    /// Unweighted average recall over the supported classes, optionally
    /// restricted to `subset`.
    #[pyo3(signature = (subset=None))]
    fn uar(&self, subset: Option<Vec<String>>) -> PyResult<f64> {
        let subset = subset
            .map(|s| s.iter().map(|l| label(l)).collect::<PyResult<Vec<_>>>())
            .transpose()?;
        self.inner.uar(subset.as_deref()).py_err()
    }

    fn weighted_accuracy(&self) -> PyResult<f64> {
        self.inner.weighted_accuracy().py_err()
    }

    /// `None` when the class has no references.
    fn recall(&self, class_label: &str) -> PyResult<Option<f64>> {
        Ok(self.inner.recall(label(class_label)?))
    }

    fn counts(&self) -> Vec<Vec<u64>> {
        self.inner.counts().iter().map(|r| r.to_vec()).collect()
    }
}

/// Streaming concordance correlation.
#[pyclass(module = "ser_py")]
#[derive(Default)]
struct CccAccumulator {
    inner: evaluation::CccAccumulator,
}

#[pymethods]
impl CccAccumulator {
    #[new]
    fn new() -> Self {
        CccAccumulator::default()
    }

    fn push(&mut self, reference: f64, prediction: f64) {
        self.inner.push(reference, prediction);
    }

    fn extend(&mut self, references: Vec<f64>, predictions: Vec<f64>) -> PyResult<()> {
        if references.len() != predictions.len() {
            return Err(DataError::new_err("references and predictions differ in length"));
        }
        for (y, p) in references.into_iter().zip(predictions) {
            self.inner.push(y, p);
        }
        Ok(())
    }

    /// `None` with fewer than two points.
    fn value(&self) -> Option<f64> {
        self.inner.value()
    }
}

/// Concordance correlation with the additive stabilizer `eps`.
#[pyfunction]
#[pyo3(signature = (y, yhat, eps=1e-8))]
fn ccc(y: Vec<f64>, yhat: Vec<f64>, eps: f64) -> PyResult<f64> {
    ser_core::losses::ccc(&y, &yhat, eps).py_err()
}

/// Time-stretches features by `factor` with linear interpolation.
#[pyfunction]
fn speed_perturb(features: Vec<Vec<f64>>, factor: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&training::speed_perturb(&tensor(&features)?, factor).py_err()?))
}

/// Label agreed by two window predictors (`"neutral"` unless both give the
/// same non-neutral emotion).
#[pyfunction]
fn consensus(a: &str, b: &str) -> PyResult<String> {
    let a: RawLabel = a.parse().py_err()?;
    let b: RawLabel = b.parse().py_err()?;
    Ok(consensus_label(a, b).name().to_string())
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Applies `section.key=value` overrides to a TOML run config.
#[pyfunction]
fn override_config(config_toml: &str, overrides: Vec<String>) -> PyResult<String> {
    Ok(RunConfig::from_toml(config_toml)
        .py_err()?
        .with_overrides(&overrides)
        .py_err()?
        .to_toml())
}

/// Writes a synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_class=4, frames=24, seed=0, split="train", prefix=""))]
fn synth(
    out_dir: PathBuf,
    n_per_class: usize,
    frames: usize,
    seed: u64,
    split: &str,
    prefix: &str,
) -> PyResult<PathBuf> {
    let split = match split {
        "train" => Split::Train,
        "dev" => Split::Dev,
        "eval" => Split::Eval,
        other => return Err(ConfigError::new_err(format!("unknown split '{other}'"))),
    };
    let cfg = SynthConfig {
        n_per_class,
        frames,
        seed,
        split,
        id_prefix: prefix.to_string(),
        ..SynthConfig::default()
    };
    synth_dataset(&cfg, &out_dir).py_err()?;
    Ok(out_dir.join("manifest.jsonl"))
}

/// Trains into `out_dir`; returns `(epochs, steps, best_dev_cat_loss)`.
#[pyfunction]
#[pyo3(signature = (train_manifest, dev_manifest, out_dir, config_toml=None, seed=None))]
fn train(
    py: Python<'_>,
    train_manifest: PathBuf,
    dev_manifest: PathBuf,
    out_dir: PathBuf,
    config_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(u32, u64, f64)> {
    let mut cfg = run_config(config_toml)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    let state = py
        .detach(|| -> ser_core::Result<_> {
            let train = Dataset::load(&train_manifest)?;
            let dev = Dataset::load(&dev_manifest)?;
            train_loop(&cfg, &train, &dev, &out_dir)
        })
        .py_err()?;
    Ok((state.epoch, state.global_step, state.best_dev_cat_loss))
}

/// Scores an ensemble of checkpoints; returns `(metric, value)` rows in
/// report order.
#[pyfunction]
#[pyo3(signature = (checkpoints, manifest, config_toml=None, classes=7, granularity="fine"))]
fn evaluate(
    py: Python<'_>,
    checkpoints: Vec<PathBuf>,
    manifest: PathBuf,
    config_toml: Option<&str>,
    classes: usize,
    granularity: &str,
) -> PyResult<Vec<(String, f64)>> {
    let mut cfg = run_config(config_toml)?;
    cfg.eval.classes = classes;
    cfg.eval.granularity = granularity.parse::<Granularity>().py_err()?;
    cfg.validate().py_err()?;
    py.detach(|| -> ser_core::Result<_> {
        let models = load_ensemble(&checkpoints, &cfg.model)?;
        let data = Dataset::load(&manifest)?;
        Ok(evaluate_dataset(&models, &data, &cfg.eval)?.rows())
    })
    .py_err()
}

/// Largest relative gradient error of the small seeded model, with the
/// parameter it occurs at.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(f64, String)> {
    let report = py
        .detach(|| {
            check_model(&GradcheckOptions {
                seed,
                ..GradcheckOptions::default()
            })
        })
        .py_err()?;
    let worst = report.worst().expect("model has trainable parameters");
    Ok((worst.max_rel_err, worst.name.clone()))
}

/// Reads a report CSV into `(metric, value)` rows.
#[pyfunction]
fn read_report(path: PathBuf) -> PyResult<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(&path).map_err(|e| to_py(ser_core::SerError::io(&path, e)))?;
    evaluation::parse_report_csv(&text, Path::new(&path)).py_err()
}

#[pymodule]
fn ser_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SerError", py.get_type::<SerError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add("LABELS", EmotionLabel::ALL.map(EmotionLabel::name).to_vec())?;
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    m.add_class::<ConfusionMatrix>()?;
    m.add_class::<CccAccumulator>()?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(speed_perturb, m)?)?;
    m.add_function(wrap_pyfunction!(consensus, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(override_config, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(read_report, m)?)?;
    Ok(())
}
