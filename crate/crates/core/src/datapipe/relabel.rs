//! Second labeling pass: replace every record's label and dimension scores
//! with a trained model's (or ensemble's) predictions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::features::read_features;
use crate::datapipe::manifest::{read_manifest, resolve, ManifestRecord};
use crate::error::{ErrorKind, Result};
use crate::evaluation::ensemble_predict;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelStats {
    pub total: usize,
    pub relabeled: usize,
    pub changed: usize,
    /// Records whose feature file could not be read.
    pub skipped: Vec<String>,
}

/// Relabels `records` (paths resolved against `manifest`). `original_label`
/// keeps the first-pass label across repeated passes. Unreadable feature
/// files skip their record with a warning; other failures abort.
pub fn two_pass_relabel(
    manifest: &Path,
    records: &[ManifestRecord],
    models: &[Model],
) -> Result<(Vec<ManifestRecord>, RelabelStats)> {
    let mut out = Vec::with_capacity(records.len());
    let mut stats = RelabelStats {
        total: records.len(),
        relabeled: 0,
        changed: 0,
        skipped: Vec::new(),
    };
    for r in records {
        let path = resolve(manifest, &r.features_path);
        let features = match read_features(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::Data => {
                log::warn!("skipping '{}': {e}", r.id);
                stats.skipped.push(r.id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let pred = ensemble_predict(models, &features)?;
        let label = pred.predicted();
        let [a, v, d] = pred.dims.to_array();
        if label != r.label {
            stats.changed += 1;
        }
        stats.relabeled += 1;
        out.push(ManifestRecord {
            label,
            arousal: Some(a),
            valence: Some(v),
            dominance: Some(d),
            original_label: Some(r.original_label.unwrap_or(r.label)),
            ..r.clone()
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((out, stats))
}

/// Reads `manifest`, relabels it, and returns the new records.
pub fn relabel_manifest(manifest: &Path, models: &[Model]) -> Result<(Vec<ManifestRecord>, RelabelStats)> {
    let records = read_manifest(manifest)?;
    two_pass_relabel(manifest, &records, models)
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::datapipe::manifest::write_manifest;
    use crate::datapipe::synth::{synth_dataset, SynthConfig};
    use crate::model::ModelConfig;

    #[test]
    fn second_pass_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&SynthConfig::default(), dir.path()).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        let model = Model::new(ModelConfig::small(5)).unwrap();
        let (first, s1) = relabel_manifest(&manifest, std::slice::from_ref(&model)).unwrap();
        assert_eq!((s1.total, s1.relabeled), (28, 28));
        let originals = read_manifest(&manifest).unwrap();
        for (new, old) in first.iter().zip(&originals) {
            assert_eq!(new.original_label, Some(old.label));
        }
        let pass1 = dir.path().join("pass1.jsonl");
        write_manifest(&pass1, &first).unwrap();
        let (second, s2) = relabel_manifest(&pass1, &[model]).unwrap();
        assert_eq!(s2.changed, 0);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.label, b.label);
            assert_eq!(b.original_label, a.original_label);
        }
    }

    #[test]
    fn missing_features_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth_dataset(&SynthConfig::default(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(&records[3].features_path)).unwrap();
        let model = Model::new(ModelConfig::small(0)).unwrap();
        let (out, stats) = relabel_manifest(&dir.path().join("manifest.jsonl"), &[model]).unwrap();
        assert_eq!(out.len(), 27);
        assert_eq!(stats.skipped, vec![records[3].id.clone()]);
    }
}
