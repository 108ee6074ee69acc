use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SerError;

/// The seven categorical emotions, in the project-wide canonical order.
/// Serialized by name, never by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
    Surprised,
    Fearful,
    Disgusted,
}

pub const NUM_CLASSES: usize = 7;

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Surprised,
        EmotionLabel::Fearful,
        EmotionLabel::Disgusted,
    ];

    /// Neutral, Angry, Sad, Happy: the reduced four-class protocol.
    pub const FOUR_CLASS: [EmotionLabel; 4] = [
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
        EmotionLabel::Happy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Fearful => "fearful",
            EmotionLabel::Disgusted => "disgusted",
        }
    }

    /// One-hot row of length 7.
    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut row = [0.0; NUM_CLASSES];
        row[self.index()] = 1.0;
        row
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = SerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        EmotionLabel::ALL
            .into_iter()
            .find(|l| l.name() == lower)
            .ok_or_else(|| SerError::Parse(format!("unknown emotion label '{s}'")))
    }
}

impl TryFrom<String> for EmotionLabel {
    type Error = SerError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<EmotionLabel> for &'static str {
    fn from(l: EmotionLabel) -> Self {
        l.name()
    }
}
