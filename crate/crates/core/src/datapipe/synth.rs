//! Seeded synthetic corpus: seven Gaussian class clusters with a
//! class-dependent temporal modulation, and dimension targets drawn around a
//! fixed per-class prototype.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::features::write_features;
use crate::datapipe::manifest::{write_manifest, ManifestRecord, Sample, Split};
use crate::error::{Result, SerError};
use crate::model::{EmotionLabel, NUM_CLASSES};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Arousal, valence, dominance prototype per class, in canonical order.
pub const PROTOTYPES: [[f64; 3]; NUM_CLASSES] = [
    [0.50, 0.50, 0.50],
    [0.70, 0.85, 0.60],
    [0.25, 0.20, 0.30],
    [0.85, 0.15, 0.80],
    [0.80, 0.60, 0.45],
    [0.75, 0.20, 0.20],
    [0.55, 0.25, 0.60],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    pub seed: u64,
    pub frame_rate_hz: f64,
    /// Scale of the class means.
    pub separation: f64,
    pub frame_noise: f64,
    pub modulation: f64,
    pub dim_noise: f64,
    /// Scale of the feature offset that encodes each sample's deviation from
    /// its class prototype, so dimension targets are recoverable from features.
    pub dim_coupling: f64,
    pub split: Split,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class: 4,
            frames: 24,
            dim: 16,
            seed: 0,
            frame_rate_hz: 50.0,
            separation: 1.0,
            frame_noise: 0.3,
            modulation: 0.5,
            dim_noise: 0.05,
            dim_coupling: 0.25,
            split: Split::Train,
            id_prefix: String::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.frames == 0 || self.dim == 0 {
            return Err(SerError::Config("n_per_class, frames and dim must all be >= 1".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(SerError::Config("frame_rate_hz must be > 0".into()));
        }
        Ok(())
    }
}

/// Generates samples in memory. Values are rounded through f32 so they equal
/// what a written-then-read feature file yields.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    // Class geometry depends on the seed only, so train and dev sets drawn
    // with different prefixes but one seed share their clusters.
    let mut geo = stream(cfg.seed, "synth/geometry");
    let means: Vec<Tensor> = (0..NUM_CLASSES)
        .map(|_| Tensor::randn(&[cfg.dim], cfg.separation, &mut geo))
        .collect();
    let dirs: Vec<Tensor> = (0..NUM_CLASSES)
        .map(|_| Tensor::randn(&[cfg.dim], 1.0, &mut geo))
        .collect();
    let dim_dirs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[cfg.dim], 1.0, &mut geo)).collect();
    let noise = Normal::new(0.0, cfg.frame_noise).map_err(|e| SerError::Config(e.to_string()))?;
    let dim_noise = Normal::new(0.0, cfg.dim_noise).map_err(|e| SerError::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(NUM_CLASSES * cfg.n_per_class);
    for (c, label) in EmotionLabel::ALL.into_iter().enumerate() {
        for i in 0..cfg.n_per_class {
            let id = format!("{}{}_{i:04}", cfg.id_prefix, label.name());
            let mut rng = stream(cfg.seed, &format!("synth/{id}"));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            // Cycles across the utterance grow with the class index.
            let freq = (c + 1) as f64 / cfg.frames.max(2) as f64;
            let dims = PROTOTYPES[c].map(|p| (p + dim_noise.sample(&mut rng)).clamp(0.0, 1.0));
            let mut offset = vec![0.0; cfg.dim];
            if cfg.dim_noise > 0.0 {
                for (k, dir) in dim_dirs.iter().enumerate() {
                    let z = (dims[k] - PROTOTYPES[c][k]) / cfg.dim_noise;
                    for (o, w) in offset.iter_mut().zip(dir.data()) {
                        *o += cfg.dim_coupling * z * w;
                    }
                }
            }
            let mut data = Vec::with_capacity(cfg.frames * cfg.dim);
            for t in 0..cfg.frames {
                let m = cfg.modulation * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
                for k in 0..cfg.dim {
                    let v = means[c].data()[k] + offset[k] + m * dirs[c].data()[k] + noise.sample(&mut rng);
                    data.push(v as f32 as f64);
                }
            }
            out.push(Sample {
                id,
                features: Tensor::new(vec![cfg.frames, cfg.dim], data)?,
                label,
                dims: Some(dims),
            });
        }
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and `features/<id>.serf` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let samples = synth_samples(cfg)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| SerError::io(&feat_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("features/{}.serf", s.id);
        write_features(&out_dir.join(&rel), &s.features)?;
        let [a, v, d] = s.dims.expect("synthetic samples carry dims");
        records.push(ManifestRecord {
            id: s.id.clone(),
            features_path: rel,
            frames: cfg.frames,
            frame_rate_hz: cfg.frame_rate_hz,
            label: s.label,
            arousal: Some(a),
            valence: Some(v),
            dominance: Some(d),
            split: cfg.split,
            language: None,
            source_id: None,
            start_s: None,
            original_label: None,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}
