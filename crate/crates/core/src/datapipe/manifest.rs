//! Newline-delimited JSON manifests and in-memory datasets.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::features::read_features;
use crate::error::{Result, SerError};
use crate::model::EmotionLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub features_path: String,
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub label: EmotionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominance: Option<f64>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// Recording this segment was cut from, for merged-granularity scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    /// Segment start within `source_id`, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    /// Label before the first relabeling pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_label: Option<EmotionLabel>,
}

impl ManifestRecord {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.frame_rate_hz
    }

    /// All three dimension targets, if every one is present.
    pub fn dims(&self) -> Option<[f64; 3]> {
        Some([self.arousal?, self.valence?, self.dominance?])
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.frames == 0 {
            return Err(format!("record '{}': frames must be >= 1", self.id));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(format!("record '{}': frame_rate_hz must be > 0", self.id));
        }
        for (name, v) in [
            ("arousal", self.arousal),
            ("valence", self.valence),
            ("dominance", self.dominance),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("record '{}': {name} {v} outside [0,1]", self.id));
                }
            }
        }
        Ok(())
    }
}

/// Parses JSONL text; errors carry the 1-based line number.
pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| SerError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| SerError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| SerError::format(path, e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| SerError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let records: Vec<ManifestRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|d| SerError::format(path, format!("record {}: {d}", i + 1)))?;
        if !seen.insert(r.id.as_str()) {
            return Err(SerError::format(path, format!("duplicate id '{}'", r.id)));
        }
    }
    Ok(records)
}

/// Writes records sorted by id.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(path, &sorted)
}

pub fn resolve(manifest: &Path, features_path: &str) -> PathBuf {
    let p = Path::new(features_path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new(".")).join(p)
}

/// One utterance with its features loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Tensor,
    pub label: EmotionLabel,
    pub dims: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Dataset {
            records: Vec::new(),
            samples,
        }
    }

    /// Reads a manifest and every feature file it references. Header frame
    /// counts must match the manifest.
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let mut samples = Vec::with_capacity(records.len());
        for r in &records {
            let path = resolve(manifest, &r.features_path);
            let features = read_features(&path)?;
            if features.rows() != r.frames {
                return Err(SerError::format(
                    &path,
                    format!(
                        "header has {} frames, manifest record '{}' says {}",
                        features.rows(),
                        r.id,
                        r.frames
                    ),
                ));
            }
            samples.push(Sample {
                id: r.id.clone(),
                features,
                label: r.label,
                dims: r.dims(),
            });
        }
        Ok(Dataset { records, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [f64; crate::model::NUM_CLASSES] {
        let mut c = [0.0; crate::model::NUM_CLASSES];
        for s in &self.samples {
            c[s.label.index()] += 1.0;
        }
        c
    }

    /// Ids present in both sets.
    pub fn overlap(&self, other: &Dataset) -> Vec<String> {
        let mine: BTreeSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        other
            .samples
            .iter()
            .filter(|s| mine.contains(s.id.as_str()))
            .map(|s| s.id.clone())
            .collect()
    }
}
