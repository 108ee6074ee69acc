//! Windowed two-predictor consensus labeling, utterance selection, segment
//! merging and annotator majority vote.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::model::{EmotionLabel, NUM_CLASSES};

const TIME_TOL: f64 = 1e-6;

/// Output domain of a first-pass window predictor: the seven emotions plus
/// `other` and `unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RawLabel {
    Emotion(EmotionLabel),
    Other,
    Unknown,
}

impl RawLabel {
    pub const ALL: [RawLabel; 9] = [
        RawLabel::Emotion(EmotionLabel::Neutral),
        RawLabel::Emotion(EmotionLabel::Happy),
        RawLabel::Emotion(EmotionLabel::Sad),
        RawLabel::Emotion(EmotionLabel::Angry),
        RawLabel::Emotion(EmotionLabel::Surprised),
        RawLabel::Emotion(EmotionLabel::Fearful),
        RawLabel::Emotion(EmotionLabel::Disgusted),
        RawLabel::Other,
        RawLabel::Unknown,
    ];
}

impl FromStr for RawLabel {
    type Err = SerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "other" => Ok(RawLabel::Other),
            "unknown" => Ok(RawLabel::Unknown),
            _ => s
                .parse::<EmotionLabel>()
                .map(RawLabel::Emotion)
                .map_err(|_| SerError::Parse(format!("unknown predictor label '{s}'"))),
        }
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawLabel::Emotion(e) => f.write_str(e.name()),
            RawLabel::Other => f.write_str("other"),
            RawLabel::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub min_emotional_fraction: f64,
    pub merge_cap_s: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            window_s: 4.0,
            hop_s: 2.0,
            min_emotional_fraction: 0.25,
            merge_cap_s: 15.0,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.window_s) {
            return Err(SerError::Config(format!(
                "need 0 < hop ({}) <= window ({})",
                self.hop_s, self.window_s
            )));
        }
        if !(self.min_emotional_fraction > 0.0 && self.min_emotional_fraction <= 1.0) {
            return Err(SerError::Config(format!(
                "min_emotional_fraction must be in (0,1], got {}",
                self.min_emotional_fraction
            )));
        }
        if !(self.merge_cap_s > 0.0) {
            return Err(SerError::Config("merge_cap_s must be > 0".into()));
        }
        Ok(())
    }
}

/// `[0, w], [h, h+w], …`, the last window truncated at `duration_s`. Always at least one window.
pub fn window_split(duration_s: f64, cfg: &ConsensusConfig) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in 0.. {
        let start = k as f64 * cfg.hop_s;
        let end = (start + cfg.window_s).min(duration_s);
        out.push((start, end));
        if end >= duration_s - TIME_TOL {
            break;
        }
    }
    out
}

/// Agreement on one of the six non-neutral emotions keeps that emotion; anything else is Neutral.
pub fn consensus_label(a: RawLabel, b: RawLabel) -> EmotionLabel {
    match (a, b) {
        (RawLabel::Emotion(x), RawLabel::Emotion(y)) if x == y && x != EmotionLabel::Neutral => x,
        _ => EmotionLabel::Neutral,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceLabel {
    pub label: EmotionLabel,
    pub keep: bool,
    /// Occurrence fraction of the modal non-neutral window label (0 when there is none).
    pub emotional_fraction: f64,
}

/// Modal non-neutral window label if its fraction reaches the threshold, else Neutral.
/// Ties go to the earlier label in canonical order.
pub fn utterance_pseudo_label(windows: &[EmotionLabel], cfg: &ConsensusConfig) -> UtteranceLabel {
    let mut counts = [0usize; NUM_CLASSES];
    for w in windows {
        counts[w.index()] += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((i, c));
        }
    }
    let n = windows.len().max(1) as f64;
    match best {
        Some((i, c)) if c as f64 / n >= cfg.min_emotional_fraction => UtteranceLabel {
            label: EmotionLabel::from_index(i).expect("index < 7"),
            keep: true,
            emotional_fraction: c as f64 / n,
        },
        Some((_, c)) => UtteranceLabel {
            label: EmotionLabel::Neutral,
            keep: true,
            emotional_fraction: c as f64 / n,
        },
        None => UtteranceLabel {
            label: EmotionLabel::Neutral,
            keep: true,
            emotional_fraction: 0.0,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: EmotionLabel,
}

impl Segment {
    pub fn new(start: f64, end: f64, label: EmotionLabel) -> Self {
        Segment { start, end, label }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Greedy left-to-right merge of adjacent equal-label segments, split exactly at `cap_s`.
pub fn merge_segments(segments: &[Segment], cap_s: f64) -> Result<Vec<Segment>> {
    if !(cap_s > 0.0) {
        return Err(SerError::Config(format!("merge cap must be > 0, got {cap_s}")));
    }
    for (i, s) in segments.iter().enumerate() {
        if !(s.end > s.start) {
            return Err(SerError::Validation(format!(
                "segment {i} has end {} <= start {}",
                s.end, s.start
            )));
        }
        if i > 0 && s.start < segments[i - 1].end - TIME_TOL {
            return Err(SerError::Validation(format!(
                "segment {i} starts at {} before the previous one ends at {}",
                s.start,
                segments[i - 1].end
            )));
        }
    }
    let mut out = Vec::new();
    let mut cur: Option<Segment> = None;
    for s in segments {
        let mut run = match cur {
            Some(c) if c.label == s.label && (s.start - c.end).abs() <= TIME_TOL => {
                Segment::new(c.start, s.end, c.label)
            }
            Some(c) => {
                out.push(c);
                *s
            }
            None => *s,
        };
        while run.duration() > cap_s + TIME_TOL {
            out.push(Segment::new(run.start, run.start + cap_s, run.label));
            run.start += cap_s;
        }
        cur = Some(run);
    }
    out.extend(cur);
    Ok(out)
}

/// Label with at least two of three votes; a three-way split yields `(Neutral, false)`.
pub fn majority_vote(votes: [EmotionLabel; 3]) -> (EmotionLabel, bool) {
    let [a, b, c] = votes;
    if a == b || a == c {
        (a, true)
    } else if b == c {
        (b, true)
    } else {
        (EmotionLabel::Neutral, false)
    }
}

/// One window prediction from a single predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorWindow {
    pub utterance_id: String,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub label: String,
}

/// A window with both predictors' labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub utterance_id: String,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub label_a: RawLabel,
    pub label_b: RawLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationRecord {
    pub id: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub label: EmotionLabel,
    pub keep: bool,
    pub emotional_fraction: f64,
    pub fallback: bool,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub total: usize,
    pub per_class: BTreeMap<String, usize>,
    pub neutral_fallback_fraction: f64,
}

fn group_by_id(preds: &[PredictorWindow]) -> BTreeMap<&str, Vec<&PredictorWindow>> {
    let mut m: BTreeMap<&str, Vec<&PredictorWindow>> = BTreeMap::new();
    for p in preds {
        m.entry(p.utterance_id.as_str()).or_default().push(p);
    }
    m
}

fn find_window<'a>(preds: &[&'a PredictorWindow], start: f64, id: &str, which: &str) -> Result<&'a PredictorWindow> {
    preds
        .iter()
        .copied()
        .find(|p| (p.window_start_s - start).abs() <= TIME_TOL)
        .ok_or_else(|| {
            SerError::Validation(format!(
                "predictor {which} has no window starting at {start} s for '{id}'"
            ))
        })
}

/// Pairs both predictors' windows for every utterance in `durations`.
pub fn pair_windows(
    pred_a: &[PredictorWindow],
    pred_b: &[PredictorWindow],
    durations: &[DurationRecord],
    cfg: &ConsensusConfig,
) -> Result<Vec<Vec<WindowPrediction>>> {
    let (ga, gb) = (group_by_id(pred_a), group_by_id(pred_b));
    let wanted: BTreeSet<&str> = durations.iter().map(|d| d.id.as_str()).collect();
    let missing = |g: &BTreeMap<&str, Vec<&PredictorWindow>>| -> Vec<String> {
        let have: BTreeSet<&str> = g.keys().copied().collect();
        wanted.symmetric_difference(&have).map(|s| s.to_string()).collect()
    };
    let (ma, mb) = (missing(&ga), missing(&gb));
    if !ma.is_empty() || !mb.is_empty() {
        return Err(SerError::Validation(format!(
            "utterance ids differ between inputs; predictor a: {ma:?}, predictor b: {mb:?}"
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    for d in durations {
        if !(d.duration_s > 0.0) {
            return Err(SerError::Validation(format!("'{}' has non-positive duration", d.id)));
        }
        let mut ws = Vec::new();
        for (start, end) in window_split(d.duration_s, cfg) {
            let a = find_window(&ga[d.id.as_str()], start, &d.id, "a")?;
            let b = find_window(&gb[d.id.as_str()], start, &d.id, "b")?;
            ws.push(WindowPrediction {
                utterance_id: d.id.clone(),
                window_start_s: start,
                window_end_s: end,
                label_a: a.label.parse()?,
                label_b: b.label.parse()?,
            });
        }
        out.push(ws);
    }
    Ok(out)
}

/// Full pseudo-labeling pass: window consensus, then utterance-level selection.
pub fn pseudolabel(
    pred_a: &[PredictorWindow],
    pred_b: &[PredictorWindow],
    durations: &[DurationRecord],
    cfg: &ConsensusConfig,
) -> Result<(Vec<PseudoLabel>, PseudoStats)> {
    cfg.validate()?;
    let paired = pair_windows(pred_a, pred_b, durations, cfg)?;
    let mut labels = Vec::with_capacity(paired.len());
    for (d, ws) in durations.iter().zip(&paired) {
        let cons: Vec<EmotionLabel> = ws.iter().map(|w| consensus_label(w.label_a, w.label_b)).collect();
        let u = utterance_pseudo_label(&cons, cfg);
        labels.push(PseudoLabel {
            id: d.id.clone(),
            label: u.label,
            keep: u.keep,
            emotional_fraction: u.emotional_fraction,
            fallback: u.label == EmotionLabel::Neutral,
            windows: ws.len(),
        });
    }
    labels.sort_by(|a, b| a.id.cmp(&b.id));
    let stats = pseudo_stats(&labels);
    Ok((labels, stats))
}

pub fn pseudo_stats(labels: &[PseudoLabel]) -> PseudoStats {
    let mut per_class: BTreeMap<String, usize> = EmotionLabel::ALL.iter().map(|l| (l.name().to_string(), 0)).collect();
    for l in labels {
        *per_class.get_mut(l.label.name()).expect("all labels present") += 1;
    }
    let fallback = labels.iter().filter(|l| l.fallback).count();
    PseudoStats {
        total: labels.len(),
        per_class,
        neutral_fallback_fraction: if labels.is_empty() {
            0.0
        } else {
            fallback as f64 / labels.len() as f64
        },
    }
}
