use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{Augmenter, Batch};
use super::optimizer::AdamW;
use super::schedule::Schedule;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datapipe::{Dataset, Sample};
use crate::error::{Result, SerError};
use crate::losses::{
    class_weights_from_counts, objective_graph, smooth_labels, weighted_cross_entropy, DimTargets, LossConfig,
};
use crate::model::{Model, NUM_CLASSES, NUM_DIMS};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const STATE_FILE: &str = "train_state.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u32,
    pub lr_backbone: f64,
    pub lr_downstream: f64,
    pub loss: f64,
    pub ce: f64,
    pub ccc_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Relative to the run directory.
    pub path: String,
    pub epoch: u32,
    pub dev_cat_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: u32,
    pub global_step: u64,
    pub best_dev_cat_loss: f64,
    pub epochs_since_improvement: u32,
    /// All random streams derive from this seed plus a tag (epoch, sample id, step).
    pub seed: u64,
    pub class_weights: Vec<f64>,
    pub stopped_early: bool,
    pub history: Vec<HistoryEntry>,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: u32,
    best: f64,
    since: u32,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Records one epoch's dev loss; true when it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn since(&self) -> u32 {
        self.since
    }
}

/// Stacks samples into a batch with smoothed categorical targets and masked dimension targets.
pub fn make_batch(samples: &[&Sample], features: Vec<Tensor>, epsilon_smooth: f64) -> Result<Batch> {
    let b = samples.len();
    let mut onehot = Tensor::zeros(&[b, NUM_CLASSES]);
    let mut dims = Tensor::zeros(&[b, NUM_DIMS]);
    let mut present = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        onehot.data_mut()[i * NUM_CLASSES + s.label.index()] = 1.0;
        if let Some(d) = s.dims {
            dims.data_mut()[i * NUM_DIMS..(i + 1) * NUM_DIMS].copy_from_slice(&d);
        }
        present.push(s.dims.is_some());
    }
    Ok(Batch {
        features,
        cat_targets: smooth_labels(&onehot, epsilon_smooth)?,
        dim_targets: DimTargets::new(dims, present)?,
    })
}

/// Class-weighted cross-entropy against hard labels, averaged over samples.
pub fn dev_cat_loss(model: &Model, samples: &[Sample], weights: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(SerError::EmptyInput("dev set is empty".into()));
    }
    let mut probs = Vec::with_capacity(samples.len() * NUM_CLASSES);
    let mut onehot = Tensor::zeros(&[samples.len(), NUM_CLASSES]);
    for (i, s) in samples.iter().enumerate() {
        probs.extend_from_slice(model.predict(&s.features)?.cat_probs.data());
        onehot.data_mut()[i * NUM_CLASSES + s.label.index()] = 1.0;
    }
    let probs = Tensor::new(vec![samples.len(), NUM_CLASSES], probs)?;
    weighted_cross_entropy(&probs, &onehot, weights)
}

/// Model, optimizer state and schedule for one run.
#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub augmenter: Augmenter,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: &RunConfig, loss: LossConfig, total_steps: u64) -> Result<Self> {
        loss.validate()?;
        Ok(Trainer {
            model,
            optimizer: AdamW::new(cfg.optim.clone())?,
            schedule: Schedule::new(cfg.schedule.clone(), total_steps)?,
            loss,
            augmenter: Augmenter::new(cfg.augment.clone(), cfg.seed)?,
            global_step: 0,
        })
    }

    /// Augment, forward, backward and update on one batch. Failures carry the step index.
    pub fn train_step(&mut self, samples: &[&Sample], epoch: u32) -> Result<StepLog> {
        let step = self.global_step + 1;
        self.step_inner(samples, epoch, step).map_err(|e| SerError::AtStep {
            step,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, samples: &[&Sample], epoch: u32, step: u64) -> Result<StepLog> {
        if samples.is_empty() {
            return Err(SerError::EmptyInput("empty training batch".into()));
        }
        let features = samples
            .iter()
            .map(|s| self.augmenter.augment_sample(&s.features, epoch, &s.id))
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(samples, features, self.loss.epsilon_smooth)?;
        let batch = self.augmenter.mixup(&batch, step)?;

        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g)?;
        let out = self.model.forward_batch(&mut g, &p, &batch.features)?;
        let lv = objective_graph(
            &mut g,
            out.probs,
            out.dims,
            &batch.cat_targets,
            &batch.dim_targets,
            &self.loss,
        )?;
        let grads = g.backward(lv.total)?;
        let mut named = IndexMap::new();
        for (name, v) in p.iter() {
            if self.model.params().get(name)?.trainable() {
                named.insert(
                    name.to_string(),
                    grads.get(&g, v).unwrap_or_else(|| Tensor::zeros(g.shape(v))),
                );
            }
        }
        let factor = self.schedule.factor(step);
        self.optimizer.step(self.model.params_mut(), &named, factor)?;
        self.global_step = step;
        let cfg = self.optimizer.config();
        Ok(StepLog {
            step,
            epoch,
            lr_backbone: cfg.backbone.lr * factor,
            lr_downstream: cfg.downstream.lr * factor,
            loss: g.value(lv.total).item(),
            ce: g.value(lv.ce).item(),
            ccc_loss: g.value(lv.ccc).item(),
        })
    }
}

/// Sentinel file guarding a run directory against concurrent writers.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => SerError::Validation(format!(
                    "{} is locked by another run ({} exists)",
                    dir.display(),
                    path.display()
                )),
                _ => SerError::io(&path, e),
            })?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn append(file: &mut File, path: &Path, line: &str) -> Result<()> {
    file.write_all(line.as_bytes()).map_err(|e| SerError::io(path, e))
}

fn create(path: &Path, header: &str) -> Result<File> {
    let mut f = File::create(path).map_err(|e| SerError::io(path, e))?;
    append(&mut f, path, header)?;
    Ok(f)
}

fn write_state(dir: &Path, state: &TrainState) -> Result<()> {
    let path = dir.join(STATE_FILE);
    let json = serde_json::to_string_pretty(state).expect("state serializes");
    fs::write(&path, json + "\n").map_err(|e| SerError::io(&path, e))
}

pub fn read_state(dir: &Path) -> Result<TrainState> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SerError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SerError::format(&path, e.to_string()))
}

/// Full training run into `out`: checkpoint per epoch, step and epoch CSV
/// logs, echoed config and the final state. Deterministic given the config.
pub fn train_loop(cfg: &RunConfig, train: &Dataset, dev: &Dataset, out: &Path) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SerError::EmptyInput("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(SerError::EmptyInput("dev set is empty".into()));
    }
    let shared = train.overlap(dev);
    if !shared.is_empty() {
        return Err(SerError::Validation(format!(
            "{} ids appear in both train and dev, e.g. '{}'",
            shared.len(),
            shared[0]
        )));
    }
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| SerError::io(&ckpt_dir, e))?;
    let _lock = RunLock::acquire(out)?;

    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| SerError::io(&config_path, e))?;

    let mut loss = cfg.loss.clone();
    if cfg.data.auto_class_weights {
        loss.class_weights = class_weights_from_counts(&train.class_counts())?;
    }
    let n = train.len();
    let bs = cfg.data.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let total_steps = steps_per_epoch * cfg.optim.epochs as u64;
    let model = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg, loss.clone(), total_steps)?;
    log::info!(
        "training {n} samples, {steps_per_epoch} steps/epoch, up to {} epochs, warmup {} steps",
        cfg.optim.epochs,
        trainer.schedule.warmup_steps()
    );

    let train_log = out.join(TRAIN_LOG);
    let mut tlog = create(
        &train_log,
        "step,epoch,lr_backbone,lr_downstream,train_loss,ce,ccc_loss\n",
    )?;
    let epoch_log = out.join(EPOCH_LOG);
    let mut elog = create(
        &epoch_log,
        "epoch,dev_cat_loss,best_dev_cat_loss,train_loss_mean,checkpoint\n",
    )?;

    let mut stopper = EarlyStopper::new(cfg.optim.patience);
    let mut state = TrainState {
        epoch: 0,
        global_step: 0,
        best_dev_cat_loss: f64::INFINITY,
        epochs_since_improvement: 0,
        seed: cfg.seed,
        class_weights: loss.class_weights.clone(),
        stopped_early: false,
        history: Vec::new(),
    };
    for epoch in 1..=cfg.optim.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        let mut text = String::new();
        for chunk in order.chunks(bs) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let s = trainer.train_step(&samples, epoch)?;
            loss_sum += s.loss;
            writeln!(
                text,
                "{},{},{},{},{},{},{}",
                s.step, s.epoch, s.lr_backbone, s.lr_downstream, s.loss, s.ce, s.ccc_loss
            )
            .expect("string write");
        }
        append(&mut tlog, &train_log, &text)?;

        let dev_loss =
            dev_cat_loss(&trainer.model, &dev.samples, &loss.class_weights).map_err(|e| SerError::AtStep {
                step: trainer.global_step,
                source: Box::new(e),
            })?;
        let rel = format!("{CHECKPOINT_DIR}/epoch_{epoch:03}.serc");
        Checkpoint::from_model(&trainer.model, epoch, trainer.global_step, dev_loss).save(&out.join(&rel))?;
        stopper.observe(dev_loss);
        let mean = loss_sum / steps_per_epoch as f64;
        append(
            &mut elog,
            &epoch_log,
            &format!("{epoch},{dev_loss},{},{mean},{rel}\n", stopper.best()),
        )?;
        log::info!("epoch {epoch}: train loss {mean:.4}, dev cat loss {dev_loss:.4}");

        state.epoch = epoch;
        state.global_step = trainer.global_step;
        state.best_dev_cat_loss = stopper.best();
        state.epochs_since_improvement = stopper.since();
        state.history.push(HistoryEntry {
            path: rel,
            epoch,
            dev_cat_loss: dev_loss,
        });
        if stopper.should_stop() && epoch < cfg.optim.epochs {
            log::info!(
                "early stop after epoch {epoch}: no dev improvement for {} epochs",
                stopper.since()
            );
            state.stopped_early = true;
            write_state(out, &state)?;
            break;
        }
        write_state(out, &state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests;
