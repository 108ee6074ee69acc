//! Scoring: confusion matrices, UAR and weighted accuracy, per-dimension
//! CCC, checkpoint selection and probability-space ensembling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, Granularity};
use crate::datapipe::pseudo::{merge_segments, Segment};
use crate::datapipe::{Dataset, ManifestRecord};
use crate::error::{Result, SerError};
use crate::model::{argmax, DimScores, EmotionLabel, Model, ModelConfig, ModelOutput, NUM_CLASSES, NUM_DIMS};
use crate::tensor::Tensor;
use crate::training::HistoryEntry;

/// Counts with rows = reference, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn accumulate(&mut self, reference: EmotionLabel, hypothesis: EmotionLabel) {
        self.counts[reference.index()][hypothesis.index()] += 1;
    }

    /// Elementwise sum, for combining partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: EmotionLabel) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    /// `None` for a class with no reference utterances.
    pub fn recall(&self, c: EmotionLabel) -> Option<f64> {
        let s = self.support(c);
        (s > 0).then(|| self.counts[c.index()][c.index()] as f64 / s as f64)
    }

    /// Mean recall over classes with support, optionally restricted to `subset`.
    /// Zero-support classes are skipped and logged.
    pub fn uar(&self, subset: Option<&[EmotionLabel]>) -> Result<f64> {
        let classes = subset.unwrap_or(&EmotionLabel::ALL);
        let mut sum = 0.0;
        let mut n = 0;
        for &c in classes {
            match self.recall(c) {
                Some(r) => {
                    sum += r;
                    n += 1;
                }
                None => log::debug!("class {c} has no support; excluded from UAR"),
            }
        }
        if n == 0 {
            return Err(SerError::UndefinedMetric("no class in the subset has support".into()));
        }
        Ok(sum / n as f64)
    }

    /// Fraction of all utterances predicted correctly.
    pub fn weighted_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(SerError::UndefinedMetric("empty confusion matrix".into()));
        }
        let diag: u64 = (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Keeps only reference rows in `subset`. Predictions outside the subset
    /// stay where they are and so count as misses.
    pub fn restrict_rows(&self, subset: &[EmotionLabel]) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::new();
        for &c in subset {
            out.counts[c.index()] = self.counts[c.index()];
        }
        out
    }
}

/// Single-pass, mergeable CCC moments (Welford / Chan updates).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CccAccumulator {
    n: u64,
    mean_y: f64,
    mean_p: f64,
    m2_y: f64,
    m2_p: f64,
    c_yp: f64,
}

impl CccAccumulator {
    pub fn push(&mut self, y: f64, p: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dy = y - self.mean_y;
        let dp = p - self.mean_p;
        self.mean_y += dy / n;
        self.mean_p += dp / n;
        self.m2_y += dy * (y - self.mean_y);
        self.m2_p += dp * (p - self.mean_p);
        self.c_yp += dy * (p - self.mean_p);
    }

    pub fn merge(&mut self, o: &CccAccumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let dy = o.mean_y - self.mean_y;
        let dp = o.mean_p - self.mean_p;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.m2_p += o.m2_p + dp * dp * na * nb / n;
        self.c_yp += o.c_yp + dy * dp * na * nb / n;
        self.mean_y += dy * nb / n;
        self.mean_p += dp * nb / n;
        self.n += o.n;
    }

    /// Population CCC, or `None` when the references are constant.
    pub fn value(&self) -> Option<f64> {
        if self.n < 2 || self.m2_y == 0.0 {
            return None;
        }
        let n = self.n as f64;
        let (vy, vp, cov) = (self.m2_y / n, self.m2_p / n, self.c_yp / n);
        let d = self.mean_y - self.mean_p;
        Some(2.0 * cov / (vy + vp + d * d))
    }
}

/// Per-dimension CCC over `[n×3]` references and predictions. A constant
/// reference dimension scores 0 with a warning.
pub fn ccc_metric(refs: &Tensor, preds: &Tensor) -> Result<[f64; NUM_DIMS]> {
    if refs.shape() != preds.shape() || refs.rank() != 2 || refs.cols() != NUM_DIMS {
        return Err(SerError::Validation(format!(
            "ccc_metric needs matching [n×3] inputs, got {:?} and {:?}",
            refs.shape(),
            preds.shape()
        )));
    }
    if refs.rows() < 2 {
        return Err(SerError::EmptyInput(format!(
            "ccc_metric needs n >= 2, got {}",
            refs.rows()
        )));
    }
    let mut acc = [CccAccumulator::default(); NUM_DIMS];
    for i in 0..refs.rows() {
        for (k, a) in acc.iter_mut().enumerate() {
            a.push(refs.at(i, k), preds.at(i, k));
        }
    }
    Ok(std::array::from_fn(|k| {
        acc[k].value().unwrap_or_else(|| {
            log::warn!("reference dimension {k} is constant; CCC reported as 0");
            0.0
        })
    }))
}

/// The `k` entries with the lowest dev loss, best first; ties prefer the earlier epoch.
pub fn select_top_checkpoints(history: &[HistoryEntry], k: usize) -> Result<Vec<HistoryEntry>> {
    if history.is_empty() {
        return Err(SerError::EmptyInput("no checkpoints in history".into()));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| a.dev_cat_loss.total_cmp(&b.dev_cat_loss).then(a.epoch.cmp(&b.epoch)));
    sorted.truncate(k);
    Ok(sorted)
}

/// Arithmetic mean of the members' probabilities and dimension scores.
pub fn ensemble_predict(models: &[Model], features: &Tensor) -> Result<ModelOutput> {
    let Some(first) = models.first() else {
        return Err(SerError::EmptyInput("ensemble has no members".into()));
    };
    let mut probs = vec![0.0; NUM_CLASSES];
    let mut dims = [0.0; NUM_DIMS];
    let k = models.len() as f64;
    let arch = |m: &Model| ModelConfig {
        seed: 0,
        ..m.config().clone()
    };
    for m in models {
        if arch(m) != arch(first) {
            return Err(SerError::Config("ensemble members have different architectures".into()));
        }
        let out = m.predict(features)?;
        for (a, p) in probs.iter_mut().zip(out.cat_probs.data()) {
            *a += p;
        }
        for (a, d) in dims.iter_mut().zip(out.dims.to_array()) {
            *a += d;
        }
    }
    probs.iter_mut().for_each(|p| *p /= k);
    dims.iter_mut().for_each(|d| *d /= k);
    Ok(ModelOutput {
        cat_logits: Tensor::vector(probs.iter().map(|p| p.ln()).collect()),
        cat_probs: Tensor::vector(probs),
        dims: DimScores::from_slice(&dims),
    })
}

/// Loads checkpoints for one architecture. Shape mismatches name the tensor.
pub fn load_ensemble(paths: &[PathBuf], cfg: &ModelConfig) -> Result<Vec<Model>> {
    if paths.is_empty() {
        return Err(SerError::EmptyInput("no checkpoints given".into()));
    }
    paths.iter().map(|p| Checkpoint::load(p)?.to_model(cfg)).collect()
}

/// One scored unit: an utterance, or a merged run of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub reference: EmotionLabel,
    pub probs: [f64; NUM_CLASSES],
    pub ref_dims: Option<[f64; NUM_DIMS]>,
    pub pred_dims: [f64; NUM_DIMS],
}

impl Scored {
    pub fn predicted(&self) -> EmotionLabel {
        EmotionLabel::from_index(argmax(&self.probs)).expect("7 classes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub uar_7: f64,
    pub uar_4: f64,
    pub weighted_accuracy: f64,
    pub per_class_recall: [Option<f64>; NUM_CLASSES],
    pub support: [u64; NUM_CLASSES],
    /// `None` when fewer than two scored units carry dimension targets.
    pub ccc: Option<[f64; NUM_DIMS]>,
    pub n_scored: usize,
}

impl EvalReport {
    pub fn from_scored(units: &[Scored], classes: usize) -> Result<Self> {
        let subset: &[EmotionLabel] = match classes {
            7 => &EmotionLabel::ALL,
            4 => &EmotionLabel::FOUR_CLASS,
            n => return Err(SerError::Config(format!("classes must be 4 or 7, got {n}"))),
        };
        let kept: Vec<&Scored> = units.iter().filter(|u| subset.contains(&u.reference)).collect();
        if kept.is_empty() {
            return Err(SerError::EmptyInput("nothing to score".into()));
        }
        let mut cm = ConfusionMatrix::new();
        for u in &kept {
            cm.accumulate(u.reference, u.predicted());
        }
        let with_dims: Vec<&&Scored> = kept.iter().filter(|u| u.ref_dims.is_some()).collect();
        let ccc = if with_dims.len() >= 2 {
            let refs: Vec<f64> = with_dims.iter().flat_map(|u| u.ref_dims.unwrap()).collect();
            let preds: Vec<f64> = with_dims.iter().flat_map(|u| u.pred_dims).collect();
            let n = with_dims.len();
            Some(ccc_metric(
                &Tensor::new(vec![n, NUM_DIMS], refs)?,
                &Tensor::new(vec![n, NUM_DIMS], preds)?,
            )?)
        } else {
            None
        };
        let uar_4 = cm.uar(Some(&EmotionLabel::FOUR_CLASS)).unwrap_or(f64::NAN);
        Ok(EvalReport {
            uar_7: cm.uar(None)?,
            uar_4,
            weighted_accuracy: cm.weighted_accuracy()?,
            per_class_recall: EmotionLabel::ALL.map(|c| cm.recall(c)),
            support: EmotionLabel::ALL.map(|c| cm.support(c)),
            ccc,
            n_scored: kept.len(),
        })
    }

    /// `(metric, value)` rows in a fixed order; undefined values are NaN.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("uar_7".to_string(), self.uar_7),
            ("uar_4".to_string(), self.uar_4),
            ("weighted_accuracy".to_string(), self.weighted_accuracy),
        ];
        for c in EmotionLabel::ALL {
            rows.push((
                format!("recall_{c}"),
                self.per_class_recall[c.index()].unwrap_or(f64::NAN),
            ));
        }
        for c in EmotionLabel::ALL {
            rows.push((format!("support_{c}"), self.support[c.index()] as f64));
        }
        for (k, name) in ["arousal", "valence", "dominance"].iter().enumerate() {
            rows.push((format!("ccc_{name}"), self.ccc.map_or(f64::NAN, |c| c[k])));
        }
        rows.push(("n_scored".to_string(), self.n_scored as f64));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            writeln!(s, "{k},{v}").expect("string write");
        }
        s
    }
}

/// Parses a `metric,value` report. Errors carry the 1-based line number.
pub fn parse_report_csv(text: &str, path: &Path) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "metric,value" => {}
        _ => return Err(SerError::format(path, "line 1: expected header 'metric,value'")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(k, v)| Some((k.trim().to_string(), v.trim().parse::<f64>().ok()?)))
            .filter(|(k, _)| !k.is_empty());
        match parsed {
            Some(row) => out.push(row),
            None => {
                return Err(SerError::format(
                    path,
                    format!("line {}: expected 'metric,value', got '{line}'", i + 1),
                ))
            }
        }
    }
    Ok(out)
}

fn unit(rec: &ManifestRecord, out: &ModelOutput) -> Scored {
    Scored {
        reference: rec.label,
        probs: std::array::from_fn(|i| out.cat_probs.data()[i]),
        ref_dims: rec.dims(),
        pred_dims: out.dims.to_array(),
    }
}

/// Concatenates consecutive same-label segments of each recording (keyed by
/// `source_id`, ordered by `start_s`) up to `cap_s`. A merged unit's
/// prediction is the duration-weighted mean of the pieces it covers.
pub fn merge_units(records: &[ManifestRecord], outputs: &[ModelOutput], cap_s: f64) -> Result<Vec<Scored>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry(r.source_id.as_deref().unwrap_or(&r.id))
            .or_default()
            .push(i);
    }
    let mut units = Vec::new();
    for (source, mut idx) in groups {
        idx.sort_by(|&a, &b| {
            records[a]
                .start_s
                .unwrap_or(0.0)
                .total_cmp(&records[b].start_s.unwrap_or(0.0))
        });
        let pieces: Vec<Segment> = idx
            .iter()
            .map(|&i| {
                let s = records[i].start_s.unwrap_or(0.0);
                Segment::new(s, s + records[i].duration_s(), records[i].label)
            })
            .collect();
        let merged =
            merge_segments(&pieces, cap_s).map_err(|e| SerError::Validation(format!("source '{source}': {e}")))?;
        for m in merged {
            let mut probs = [0.0; NUM_CLASSES];
            let mut pred = [0.0; NUM_DIMS];
            let mut refd = [0.0; NUM_DIMS];
            let mut all_dims = true;
            let mut total = 0.0;
            for (&i, p) in idx.iter().zip(&pieces) {
                let w = (p.end.min(m.end) - p.start.max(m.start)).max(0.0);
                if w <= 0.0 {
                    continue;
                }
                total += w;
                let u = unit(&records[i], &outputs[i]);
                for (a, v) in probs.iter_mut().zip(u.probs) {
                    *a += w * v;
                }
                for (a, v) in pred.iter_mut().zip(u.pred_dims) {
                    *a += w * v;
                }
                match u.ref_dims {
                    Some(d) => refd.iter_mut().zip(d).for_each(|(a, v)| *a += w * v),
                    None => all_dims = false,
                }
            }
            units.push(Scored {
                reference: m.label,
                probs: probs.map(|v| v / total),
                ref_dims: all_dims.then(|| refd.map(|v| v / total)),
                pred_dims: pred.map(|v| v / total),
            });
        }
    }
    Ok(units)
}

/// Ensemble prediction over a loaded dataset, scored at the configured granularity.
pub fn evaluate_dataset(models: &[Model], data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if data.records.len() != data.samples.len() {
        return Err(SerError::Validation(
            "dataset records and samples differ in length".into(),
        ));
    }
    let outputs = data
        .samples
        .iter()
        .map(|s| ensemble_predict(models, &s.features))
        .collect::<Result<Vec<_>>>()?;
    let units = match cfg.granularity {
        Granularity::Fine => data.records.iter().zip(&outputs).map(|(r, o)| unit(r, o)).collect(),
        Granularity::Merged => merge_units(&data.records, &outputs, cfg.merge_cap_s)?,
    };
    EvalReport::from_scored(&units, cfg.classes)
}
