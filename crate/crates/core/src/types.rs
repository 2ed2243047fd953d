//! Domain data model: emotion vocabulary, speaker metadata, utterances and dialogues.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMOTIONS: [&str; 7] = ["happy", "sad", "surprised", "fearful", "disgusted", "angry", "neutral"];

/// Ordered set of lowercase emotion names with a fallback label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct EmotionVocabulary {
    labels: Vec<String>,
    default_label: String,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    labels: Vec<String>,
    default_label: String,
}

impl TryFrom<RawVocabulary> for EmotionVocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        EmotionVocabulary::new(raw.labels, &raw.default_label)
    }
}

impl From<EmotionVocabulary> for RawVocabulary {
    fn from(v: EmotionVocabulary) -> Self {
        RawVocabulary {
            labels: v.labels,
            default_label: v.default_label,
        }
    }
}

impl Default for EmotionVocabulary {
    fn default() -> Self {
        EmotionVocabulary {
            labels: DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect(),
            default_label: "neutral".to_string(),
        }
    }
}

impl EmotionVocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>, default_label: &str) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Config("emotion vocabulary is empty".into()));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() || label.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::Config(format!(
                    "emotion label `{label}` must be a non-empty lowercase word"
                )));
            }
            if labels[..i].contains(label) {
                return Err(Error::Config(format!("duplicate emotion label `{label}`")));
            }
        }
        if !labels.iter().any(|l| l == default_label) {
            return Err(Error::Config(format!(
                "default label `{default_label}` is not in the vocabulary"
            )));
        }
        Ok(EmotionVocabulary {
            labels,
            default_label: default_label.to_string(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn default_label(&self) -> &str {
        &self.default_label
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn check(&self, label: &str) -> Result<()> {
        if self.contains(label) {
            Ok(())
        } else {
            Err(Error::UnknownEmotion(label.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Low,
    Medium,
    High,
    Unspecified,
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Intensity::Low => "low",
            Intensity::Medium => "medium",
            Intensity::High => "high",
            Intensity::Unspecified => "unspecified",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_intensity: Option<Intensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<String>,
}

impl SpeakerMetadata {
    pub fn is_empty(&self) -> bool {
        *self == SpeakerMetadata::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Ai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: Speaker,
    pub transcript: String,
    pub emotion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    #[serde(default, skip_serializing_if = "SpeakerMetadata::is_empty")]
    pub metadata: SpeakerMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facial_description: Option<String>,
}

impl UtteranceRecord {
    pub fn ai(emotion: impl Into<String>, text: impl Into<String>) -> Self {
        UtteranceRecord {
            speaker: Speaker::Ai,
            transcript: text.into(),
            emotion: emotion.into(),
            audio_ref: None,
            video_ref: None,
            metadata: SpeakerMetadata::default(),
            facial_description: None,
        }
    }

    /// Stable identity used for feature lookup: the media references, or the transcript when
    /// the record has no media.
    pub fn media_key(&self) -> String {
        format!(
            "{}|{}",
            self.audio_ref.as_deref().unwrap_or(""),
            self.video_ref.as_deref().unwrap_or("")
        )
    }
}

/// A dialogue of `R` rounds; each round is a user turn followed by an AI turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<UtteranceRecord>,
}

/// One round of a dialogue together with everything said before it.
#[derive(Debug, Clone, Copy)]
pub struct Round<'a> {
    pub history: &'a [UtteranceRecord],
    pub user: &'a UtteranceRecord,
    pub ai: &'a UtteranceRecord,
}

impl Dialogue {
    pub fn new(dialogue_id: impl Into<String>, turns: Vec<UtteranceRecord>) -> Result<Self> {
        let d = Dialogue {
            dialogue_id: dialogue_id.into(),
            turns,
        };
        d.check_structure(0)?;
        Ok(d)
    }

    pub fn rounds(&self) -> usize {
        self.turns.len() / 2
    }

    /// Checks alternation and AI-turn media rules. `record` is reported in errors.
    pub(crate) fn check_structure(&self, record: usize) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::invariant(record, "turns", "dialogue has no turns"));
        }
        if !self.turns.len().is_multiple_of(2) {
            return Err(Error::invariant(
                record,
                "turns",
                format!("odd number of turns ({})", self.turns.len()),
            ));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Ai };
            if turn.speaker != expected {
                return Err(Error::invariant(
                    record,
                    &format!("turns[{i}].speaker"),
                    format!("expected {expected:?} turn, found {:?}", turn.speaker),
                ));
            }
            if turn.speaker == Speaker::Ai && (turn.audio_ref.is_some() || turn.video_ref.is_some()) {
                return Err(Error::invariant(
                    record,
                    &format!("turns[{i}]"),
                    "ai turns never carry media",
                ));
            }
        }
        Ok(())
    }

    /// Splits the dialogue into its rounds. Round `r` (0-based) has a history of `2r` turns.
    pub fn split_rounds(&self) -> Vec<Round<'_>> {
        self.turns
            .chunks_exact(2)
            .enumerate()
            .map(|(r, pair)| Round {
                history: &self.turns[..2 * r],
                user: &pair[0],
                ai: &pair[1],
            })
            .collect()
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }
}
