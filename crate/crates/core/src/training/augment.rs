//! Training-time augmentation: speed perturbation, additive noise at a
//! target SNR, and MixUp. Applied in that order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datapipe::features::read_features;
use crate::error::{Result, SerError};
use crate::losses::DimTargets;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mixup: bool,
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    pub noise: bool,
    pub noise_prob: f64,
    /// Inclusive SNR range in dB, sampled uniformly.
    pub noise_snr_db: (f64, f64),
    /// Directory of feature files used as noise; white noise when unset.
    pub noise_dir: Option<PathBuf>,
    pub speed: bool,
    pub speed_prob: f64,
    pub speed_factors: Vec<f64>,
    /// Overrides the run seed for augmentation streams.
    pub seed: Option<u64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mixup: true,
            mixup_prob: 0.5,
            mixup_alpha: 0.3,
            noise: true,
            noise_prob: 0.5,
            noise_snr_db: (5.0, 20.0),
            noise_dir: None,
            speed: true,
            speed_prob: 0.5,
            speed_factors: vec![0.9, 1.1],
            seed: None,
        }
    }
}

impl AugmentConfig {
    /// Everything switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            mixup: false,
            noise: false,
            speed: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mixup_prob", self.mixup_prob),
            ("noise_prob", self.noise_prob),
            ("speed_prob", self.speed_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SerError::Config(format!("augment.{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(SerError::Config(format!(
                "augment.mixup_alpha must be > 0, got {}",
                self.mixup_alpha
            )));
        }
        let (lo, hi) = self.noise_snr_db;
        if !(lo <= hi) {
            return Err(SerError::Config(format!(
                "augment.noise_snr_db range [{lo}, {hi}] is empty"
            )));
        }
        if self.speed && (self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| !(f > 0.0))) {
            return Err(SerError::Config(
                "augment.speed_factors must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear interpolation of the time axis onto `len` frames, sampling source
/// position `min(j·step, T−1)` for output frame `j`.
fn resample(x: &Tensor, len: usize, step: f64) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(len * d);
    for j in 0..len {
        let s = (j as f64 * step).min((t - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(t - 1);
        let w = s - i0 as f64;
        let (a, b) = (x.row(i0), x.row(i1));
        out.extend(a.iter().zip(b).map(|(&a, &b)| a + w * (b - a)));
    }
    Tensor::new(vec![len, d], out).expect("consistent shape")
}

/// Resamples `[T×D]` features to `round(T/factor)` frames.
pub fn speed_perturb(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return Err(SerError::Config(format!("speed factor must be > 0, got {factor}")));
    }
    if x.rank() != 2 || x.rows() == 0 {
        return Err(SerError::EmptyInput(format!(
            "features must be [T×D] with T >= 1, got {:?}",
            x.shape()
        )));
    }
    let len = (x.rows() as f64 / factor).round() as usize;
    if len < 1 {
        return Err(SerError::DegenerateLength(format!(
            "{} frames at factor {factor} leaves no frames",
            x.rows()
        )));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    Ok(resample(x, len, factor))
}

/// Stretches or compresses `x` to exactly `len` frames.
pub fn resample_to(x: &Tensor, len: usize) -> Tensor {
    if x.rows() == len {
        return x.clone();
    }
    let step = if len > 1 {
        (x.rows() - 1) as f64 / (len - 1) as f64
    } else {
        0.0
    };
    resample(x, len, step)
}

/// Mean squared value.
pub fn power(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn snr_db(signal: &Tensor, noise: &Tensor) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

pub trait NoiseSource: Send + Sync {
    /// A `[frames×dim]` noise matrix.
    fn sample(&self, frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Seeded standard-normal noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhiteNoise;

impl NoiseSource for WhiteNoise {
    fn sample(&self, frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data = (0..frames * dim).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(vec![frames, dim], data)
    }
}

/// Noise clips read from a directory of feature files. A random clip is
/// picked, then a random offset; short clips are tiled.
#[derive(Debug, Clone)]
pub struct FileNoise {
    clips: Vec<Tensor>,
}

impl FileNoise {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| SerError::io(dir, e))?;
        let mut paths = Vec::new();
        for e in entries {
            let p = e.map_err(|e| SerError::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x == "serf") {
                paths.push(p);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(SerError::EmptyInput(format!(
                "no .serf noise files in {}",
                dir.display()
            )));
        }
        let clips = paths.iter().map(|p| read_features(p)).collect::<Result<_>>()?;
        Ok(FileNoise { clips })
    }

    pub fn from_clips(clips: Vec<Tensor>) -> Result<Self> {
        if clips.is_empty() {
            return Err(SerError::EmptyInput("no noise clips".into()));
        }
        Ok(FileNoise { clips })
    }
}

impl NoiseSource for FileNoise {
    fn sample(&self, frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let clip = &self.clips[rng.random_range(0..self.clips.len())];
        if clip.cols() != dim {
            return Err(SerError::Validation(format!(
                "noise clip has dim {}, features have {dim}",
                clip.cols()
            )));
        }
        let start = rng.random_range(0..clip.rows());
        let mut data = Vec::with_capacity(frames * dim);
        for t in 0..frames {
            data.extend_from_slice(clip.row((start + t) % clip.rows()));
        }
        Tensor::new(vec![frames, dim], data)
    }
}

/// Adds noise scaled to the requested SNR. `+inf` returns the input, and so
/// does a zero-power signal (with a warning).
pub fn add_noise_snr(x: &Tensor, snr: f64, source: &dyn NoiseSource, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if x.is_empty() {
        return Err(SerError::EmptyInput("cannot add noise to empty features".into()));
    }
    if snr == f64::INFINITY {
        return Ok(x.clone());
    }
    if snr.is_nan() {
        return Err(SerError::Config("snr is NaN".into()));
    }
    let ps = power(x);
    if ps == 0.0 {
        log::warn!("zero-power signal; noise not added");
        return Ok(x.clone());
    }
    let n = source.sample(x.rows(), x.cols(), rng)?;
    let pn = power(&n);
    if !(pn > 0.0) {
        return Err(SerError::Validation("noise source produced a zero-power clip".into()));
    }
    let k = (ps / (pn * 10f64.powf(snr / 10.0))).sqrt();
    let data = x.data().iter().zip(n.data()).map(|(a, b)| a + k * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One training batch after per-sample augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Tensor>,
    /// `[B×7]`, rows on the simplex.
    pub cat_targets: Tensor,
    pub dim_targets: DimTargets,
}

/// `λ·row_i + (1−λ)·row_perm(i)` for features and both target sets. A
/// partner with a different length is resampled to row `i`'s length. The
/// mixed dimension target is present only when both rows are.
pub fn mixup_with(batch: &Batch, lambda: f64, perm: &[usize]) -> Result<Batch> {
    let b = batch.features.len();
    if perm.len() != b {
        return Err(SerError::Validation(format!(
            "permutation of length {} for batch of {b}",
            perm.len()
        )));
    }
    let mu = 1.0 - lambda;
    let mut features = Vec::with_capacity(b);
    for (i, &j) in perm.iter().enumerate() {
        let x = &batch.features[i];
        let y = resample_to(&batch.features[j], x.rows());
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, c)| lambda * a + mu * c)
            .collect();
        features.push(Tensor::new(x.shape().to_vec(), data)?);
    }
    let mix_rows = |t: &Tensor| -> Result<Tensor> {
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for (i, &j) in perm.iter().enumerate() {
            data.extend(t.row(i).iter().zip(t.row(j)).map(|(a, c)| lambda * a + mu * c));
        }
        Tensor::new(vec![b, c], data)
    };
    let present = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| batch.dim_targets.present[i] && batch.dim_targets.present[j])
        .collect();
    Ok(Batch {
        features,
        cat_targets: mix_rows(&batch.cat_targets)?,
        dim_targets: DimTargets::new(mix_rows(&batch.dim_targets.values)?, present)?,
    })
}

pub fn beta_sample(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = Beta::new(alpha, alpha).map_err(|e| SerError::Config(format!("beta({alpha}): {e}")))?;
    Ok(d.sample(rng))
}

/// Applies MixUp with probability `mixup_prob`. Returns the coefficient used, if any.
pub fn mixup_batch(batch: &Batch, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Batch, Option<f64>)> {
    if !cfg.mixup || rng.random::<f64>() >= cfg.mixup_prob {
        return Ok((batch.clone(), None));
    }
    if batch.features.len() < 2 {
        log::debug!("mixup skipped for a batch of one");
        return Ok((batch.clone(), None));
    }
    let lambda = beta_sample(cfg.mixup_alpha, rng)?;
    let mut perm: Vec<usize> = (0..batch.features.len()).collect();
    perm.shuffle(rng);
    Ok((mixup_with(batch, lambda, &perm)?, Some(lambda)))
}

/// Seeded augmentation front end. Every sample draws from its own stream keyed
/// by epoch and id, so the result never depends on batch order or threads.
pub struct Augmenter {
    cfg: AugmentConfig,
    seed: u64,
    noise: Box<dyn NoiseSource>,
    applied: AtomicU64,
}

impl std::fmt::Debug for Augmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Augmenter")
            .field("cfg", &self.cfg)
            .field("seed", &self.seed)
            .field("applied", &self.applied())
            .finish()
    }
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let noise: Box<dyn NoiseSource> = match (&cfg.noise_dir, cfg.noise) {
            (Some(dir), true) => Box::new(FileNoise::from_dir(dir)?),
            _ => Box::new(WhiteNoise),
        };
        Ok(Augmenter {
            seed: cfg.seed.unwrap_or(run_seed),
            cfg,
            noise,
            applied: AtomicU64::new(0),
        })
    }

    pub fn with_noise(mut self, noise: Box<dyn NoiseSource>) -> Self {
        self.noise = noise;
        self
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    /// Number of augmentations applied so far.
    pub fn applied(&self) -> u64 {
        self.applied.load(Ordering::Relaxed)
    }

    /// Speed, then noise, each with its own probability.
    pub fn augment_sample(&self, x: &Tensor, epoch: u32, id: &str) -> Result<Tensor> {
        let mut rng = stream(self.seed, &format!("aug/{epoch}/{id}"));
        let mut out = x.clone();
        if self.cfg.speed && rng.random::<f64>() < self.cfg.speed_prob {
            let f = self.cfg.speed_factors[rng.random_range(0..self.cfg.speed_factors.len())];
            out = speed_perturb(&out, f)?;
            self.applied.fetch_add(1, Ordering::Relaxed);
        }
        if self.cfg.noise && rng.random::<f64>() < self.cfg.noise_prob {
            let (lo, hi) = self.cfg.noise_snr_db;
            let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            out = add_noise_snr(&out, snr, self.noise.as_ref(), &mut rng)?;
            self.applied.fetch_add(1, Ordering::Relaxed);
        }
        Ok(out)
    }

    pub fn mixup(&self, batch: &Batch, step: u64) -> Result<Batch> {
        let mut rng = stream(self.seed, &format!("mixup/{step}"));
        let (out, lambda) = mixup_batch(batch, &self.cfg, &mut rng)?;
        if lambda.is_some() {
            self.applied.fetch_add(1, Ordering::Relaxed);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
