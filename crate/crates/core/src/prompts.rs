//! Stage prompts, speaker-metadata text and the tagged AI output grammar.
//!
//! AI outputs are serialized as `<|emo_begin|>label<|emo_end|>response`; training targets and
//! history turns append `<|eos|>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{PromptPart, Special};
use crate::types::{EmotionVocabulary, SpeakerMetadata};
use crate::util::sha256_hex;

const BUILTIN: &str = include_str!("../assets/prompts.txt");

const REQUIRED: [&str; 8] = [
    "speech.asr",
    "speech.asr_ser",
    "face.emr",
    "face.emr_emd",
    "dialogue.system",
    "dialogue.user",
    "dialogue.ai",
    "answer",
];

/// A parsed, hashed prompt file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub version: u32,
    templates: BTreeMap<String, String>,
    source: String,
    hash: String,
}

impl PromptSet {
    pub fn builtin() -> Self {
        PromptSet::parse(BUILTIN).expect("builtin prompt set is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut templates = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let finish = |cur: Option<(String, Vec<&str>)>, out: &mut BTreeMap<String, String>| {
            if let Some((name, lines)) = cur {
                let body = lines.join("\n").trim_matches('\n').replace("\\n", "\n");
                out.insert(name, body);
            }
        };
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(current.take(), &mut templates);
                current = Some((name.trim().to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if let Some(v) = line.trim().strip_prefix("version") {
                let v = v.trim().trim_start_matches('=').trim();
                version = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad prompt-set version `{v}`")))?,
                );
            } else if !(line.trim().is_empty() || line.starts_with('#')) {
                return Err(Error::Config(format!("unexpected line in prompt set: `{line}`")));
            }
        }
        finish(current, &mut templates);
        for name in REQUIRED {
            if !templates.contains_key(name) {
                return Err(Error::Config(format!("prompt set lacks template `{name}`")));
            }
        }
        Ok(PromptSet {
            version: version.ok_or_else(|| Error::Config("prompt set has no version".into()))?,
            templates,
            source: text.to_string(),
            hash: sha256_hex(text.as_bytes()),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// The file text this set was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    SpeechUnderstanding,
    FaceVideoUnderstanding,
    AudioVisualDialogue,
}

/// Stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechTask {
    Asr,
    AsrSer,
}

/// How much speaker metadata a stage-1 SER target carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerTarget {
    /// Emotion label, plus intensity when the record has one.
    #[default]
    Emotion,
    /// Every metadata field present on the record.
    FullMetadata,
}

impl SerTarget {
    pub fn render(self, emotion: &str, md: &SpeakerMetadata) -> String {
        let md = match self {
            SerTarget::Emotion => SpeakerMetadata {
                emotion: Some(emotion.to_string()),
                emotion_intensity: md.emotion_intensity,
                ..SpeakerMetadata::default()
            },
            SerTarget::FullMetadata => SpeakerMetadata {
                emotion: Some(emotion.to_string()),
                ..md.clone()
            },
        };
        render_metadata(&md)
    }
}

/// Stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceTask {
    Emr,
    EmrEmd,
}

/// Which user-turn inputs reach the decoder. Serialized as letters, e.g. `"av"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modality {
    pub text: bool,
    pub audio: bool,
    pub video: bool,
}

impl Modality {
    pub const TEXT: Modality = Modality {
        text: true,
        audio: false,
        video: false,
    };
    pub const AUDIO: Modality = Modality {
        text: false,
        audio: true,
        video: false,
    };
    pub const AUDIO_VISUAL: Modality = Modality {
        text: false,
        audio: true,
        video: true,
    };
}

impl Default for Modality {
    fn default() -> Self {
        Modality::AUDIO_VISUAL
    }
}

impl FromStr for Modality {
    type Err = Error;

    /// Letters `t`, `a`, `v` in any order, e.g. `av` or `t`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modality {
            text: false,
            audio: false,
            video: false,
        };
        for c in s.chars() {
            match c.to_ascii_lowercase() {
                't' => m.text = true,
                'a' => m.audio = true,
                'v' => m.video = true,
                '+' | ',' => {}
                _ => return Err(Error::Config(format!("unknown modality `{c}` in `{s}`"))),
            }
        }
        if !(m.text || m.audio || m.video) {
            return Err(Error::Config("modality set is empty".into()));
        }
        Ok(m)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (on, c) in [(self.text, 't'), (self.audio, 'a'), (self.video, 'v')] {
            if on {
                f.write_char(c)?;
            }
        }
        Ok(())
    }
}

impl Serialize for Modality {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A rendered prompt: parts in order, plus the stage it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub stage: PromptStage,
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    /// Human-readable rendering with feature spans shown as placeholders.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            match p {
                PromptPart::Text(s) | PromptPart::Target(s) => out.push_str(s),
                PromptPart::Audio(i) => {
                    let _ = write!(
                        out,
                        "{}[audio {i}]{}",
                        Special::AudioBegin.marker(),
                        Special::AudioEnd.marker()
                    );
                }
                PromptPart::Video(i) => {
                    let _ = write!(
                        out,
                        "{}[video {i}]{}",
                        Special::VideoBegin.marker(),
                        Special::VideoEnd.marker()
                    );
                }
            }
        }
        out
    }

    pub fn target_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, PromptPart::Target(_))).count()
    }
}

/// Present metadata fields as short clauses in a fixed order; empty metadata gives `""`.
pub fn render_metadata(md: &SpeakerMetadata) -> String {
    let mut clauses = Vec::new();
    match (&md.emotion, md.emotion_intensity) {
        (Some(e), Some(i)) => clauses.push(format!("emotion: {e} (intensity: {i})")),
        (Some(e), None) => clauses.push(format!("emotion: {e}")),
        (None, Some(i)) => clauses.push(format!("intensity: {i}")),
        (None, None) => {}
    }
    if let Some(d) = &md.emotion_description {
        clauses.push(format!("description: {d}"));
    }
    if let Some(g) = &md.gender {
        clauses.push(format!("gender: {g}"));
    }
    if let Some(a) = md.age {
        clauses.push(format!("age: {a}"));
    }
    if let Some(e) = &md.ethnicity {
        clauses.push(format!("ethnicity: {e}"));
    }
    clauses.join(", ")
}

/// `<|emo_begin|>label<|emo_end|>text`.
pub fn format_ai_target(emotion: &str, text: &str, vocab: &EmotionVocabulary) -> Result<String> {
    vocab.check(emotion)?;
    if text.is_empty() {
        return Err(Error::EmptyInput("ai response"));
    }
    Ok(format!(
        "{}{emotion}{}{text}",
        Special::EmoBegin.marker(),
        Special::EmoEnd.marker()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub emotion: String,
    pub text: String,
    /// Set when lenient parsing had to fall back.
    pub warning: Option<String>,
}

fn strict_parse(raw: &str, vocab: &EmotionVocabulary) -> std::result::Result<(String, String), String> {
    let body = raw.strip_suffix(Special::Eos.marker()).unwrap_or(raw);
    let rest = body
        .strip_prefix(Special::EmoBegin.marker())
        .ok_or_else(|| "missing emotion tag".to_string())?;
    let (label, text) = rest
        .split_once(Special::EmoEnd.marker())
        .ok_or_else(|| "unterminated emotion tag".to_string())?;
    if !vocab.contains(label) {
        return Err(format!("unknown emotion `{label}`"));
    }
    if text.is_empty() {
        return Err("empty response".into());
    }
    if Special::ALL.iter().any(|s| text.contains(s.marker())) {
        return Err("reserved marker inside response".into());
    }
    Ok((label.to_string(), text.to_string()))
}

fn strip_markers(s: &str) -> String {
    let mut out = s.to_string();
    for sp in Special::ALL {
        out = out.replace(sp.marker(), "");
    }
    out.trim().to_string()
}

/// Inverse of [`format_ai_target`]. Lenient mode never fails: a missing or garbled tag yields
/// the default label and the text without markers, with a warning.
pub fn parse_ai_output(raw: &str, mode: ParseMode, vocab: &EmotionVocabulary) -> Result<ParsedOutput> {
    match strict_parse(raw, vocab) {
        Ok((emotion, text)) => Ok(ParsedOutput {
            emotion,
            text,
            warning: None,
        }),
        Err(why) if mode == ParseMode::Strict => Err(Error::Parse(why)),
        Err(why) => {
            // Keep a recognizable label even when the rest is malformed.
            let emotion = raw
                .strip_prefix(Special::EmoBegin.marker())
                .and_then(|r| r.split_once(Special::EmoEnd.marker()))
                .map(|(l, _)| l)
                .filter(|l| vocab.contains(l))
                .unwrap_or(vocab.default_label())
                .to_string();
            let text = match raw.split_once(Special::EmoEnd.marker()) {
                Some((_, t)) => strip_markers(t),
                None => strip_markers(raw),
            };
            Ok(ParsedOutput {
                emotion,
                text,
                warning: Some(why),
            })
        }
    }
}

/// User-side inputs of one dialogue round. Feature indices refer to the lists handed to
/// [`crate::lm::assemble_input`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UserSlot<'a> {
    pub transcript: Option<&'a str>,
    pub audio: Option<usize>,
    pub video: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AiSlot<'a> {
    /// A turn the model learns to produce.
    Target { emotion: &'a str, text: &'a str },
    /// A completed turn shown as conditioning.
    Context { emotion: &'a str, text: &'a str },
    /// The generation point; only valid for the last round.
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSlots<'a> {
    pub user: UserSlot<'a>,
    pub ai: AiSlot<'a>,
}

pub fn speech_prompt_name(task: SpeechTask) -> &'static str {
    match task {
        SpeechTask::Asr => "speech.asr",
        SpeechTask::AsrSer => "speech.asr_ser",
    }
}

pub fn face_prompt_name(task: FaceTask) -> &'static str {
    match task {
        FaceTask::Emr => "face.emr",
        FaceTask::EmrEmd => "face.emr_emd",
    }
}

impl PromptSet {
    /// Instruction, audio span and answer cue; `target` (if any) follows and ends with `eos`.
    pub fn build_stage1_prompt(&self, task: SpeechTask, target: Option<&str>) -> Prompt {
        let mut parts = vec![
            PromptPart::Text(self.get(speech_prompt_name(task)).to_string()),
            PromptPart::Audio(0),
            PromptPart::Text(self.get("answer").to_string()),
        ];
        if let Some(t) = target {
            parts.push(PromptPart::Target(format!("{t}{}", Special::Eos.marker())));
        }
        Prompt {
            stage: PromptStage::SpeechUnderstanding,
            parts,
        }
    }

    pub fn build_stage2_prompt(&self, task: FaceTask, target: Option<&str>) -> Prompt {
        let mut parts = vec![
            PromptPart::Text(self.get(face_prompt_name(task)).to_string()),
            PromptPart::Video(0),
            PromptPart::Text(self.get("answer").to_string()),
        ];
        if let Some(t) = target {
            parts.push(PromptPart::Target(format!("{t}{}", Special::Eos.marker())));
        }
        Prompt {
            stage: PromptStage::FaceVideoUnderstanding,
            parts,
        }
    }

    /// System text, then each round as user cue, user inputs, AI cue and the AI turn.
    pub fn build_stage3_prompt(
        &self,
        rounds: &[RoundSlots<'_>],
        vocab: &EmotionVocabulary,
        visual_first: bool,
    ) -> Result<Prompt> {
        let mut parts = vec![PromptPart::Text(self.get("dialogue.system").to_string())];
        for (i, r) in rounds.iter().enumerate() {
            let u = &r.user;
            if u.transcript.is_none() && u.audio.is_none() && u.video.is_none() {
                return Err(Error::Precondition(format!("round {} has no user input", i + 1)));
            }
            let mut user_text = self.get("dialogue.user").to_string();
            if let Some(t) = u.transcript {
                user_text.push(' ');
                user_text.push_str(t);
            }
            parts.push(PromptPart::Text(user_text));
            let spans = [u.audio.map(PromptPart::Audio), u.video.map(PromptPart::Video)];
            let order: [usize; 2] = if visual_first { [1, 0] } else { [0, 1] };
            for k in order {
                if let Some(p) = &spans[k] {
                    parts.push(p.clone());
                }
            }
            parts.push(PromptPart::Text(self.get("dialogue.ai").to_string()));
            match r.ai {
                AiSlot::Target { emotion, text } => parts.push(PromptPart::Target(format!(
                    "{}{}",
                    format_ai_target(emotion, text, vocab)?,
                    Special::Eos.marker()
                ))),
                AiSlot::Context { emotion, text } => parts.push(PromptPart::Text(format!(
                    "{}{}",
                    format_ai_target(emotion, text, vocab)?,
                    Special::Eos.marker()
                ))),
                AiSlot::Open if i + 1 == rounds.len() => {}
                AiSlot::Open => {
                    return Err(Error::Precondition("only the last round may be open".into()));
                }
            }
        }
        Ok(Prompt {
            stage: PromptStage::AudioVisualDialogue,
            parts,
        })
    }
}
