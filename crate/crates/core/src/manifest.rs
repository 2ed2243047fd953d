//! JSON-lines dataset manifests.
//!
//! The first line is a header, every following non-blank line is one record:
//!
//! ```text
//! {"format":"avemo-manifest","version":1,"split":"train"}
//! {"kind":"dialogue","tasks":["dialogue","asr"],"dialogue":{"dialogue_id":"d0","turns":[...]}}
//! {"kind":"utterance","tasks":["ser"],"utterance":{"speaker":"user","transcript":"...",...}}
//! ```
//!
//! Media paths are relative to the directory holding the manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dialogue, EmotionVocabulary, Speaker, UtteranceRecord};

pub const MANIFEST_FORMAT: &str = "avemo-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Asr,
    Ser,
    Emr,
    Emd,
    Dialogue,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::Asr => "asr",
            TaskTag::Ser => "ser",
            TaskTag::Emr => "emr",
            TaskTag::Emd => "emd",
            TaskTag::Dialogue => "dialogue",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Dialogue {
        tasks: BTreeSet<TaskTag>,
        dialogue: Dialogue,
    },
    Utterance {
        tasks: BTreeSet<TaskTag>,
        utterance: UtteranceRecord,
    },
}

impl Record {
    pub fn tasks(&self) -> &BTreeSet<TaskTag> {
        match self {
            Record::Dialogue { tasks, .. } | Record::Utterance { tasks, .. } => tasks,
        }
    }

    /// User utterances this record contributes to single-utterance tasks.
    pub fn user_utterances(&self) -> Vec<&UtteranceRecord> {
        match self {
            Record::Dialogue { dialogue, .. } => dialogue.user_turns().collect(),
            Record::Utterance { utterance, .. } => vec![utterance],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
}

/// How unknown emotion strings are treated during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmotionPolicy {
    #[default]
    Strict,
    /// Map unknown labels to the vocabulary default and log a warning.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<Record>,
    /// Directory media references are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            split,
            records: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.records.iter().filter_map(|r| match r {
            Record::Dialogue { tasks, dialogue } if tasks.contains(&TaskTag::Dialogue) => Some(dialogue),
            _ => None,
        })
    }

    /// All user utterances from records tagged with `task`, in manifest order.
    pub fn utterances_for(&self, task: TaskTag) -> Vec<&UtteranceRecord> {
        self.records
            .iter()
            .filter(|r| r.tasks().contains(&task))
            .flat_map(|r| r.user_utterances())
            .collect()
    }

    pub fn has_task(&self, task: TaskTag) -> bool {
        self.records.iter().any(|r| r.tasks().contains(&task))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            split: self.split,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Parses manifest text without touching the filesystem or checking invariants.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (header_line, header_text) = lines.next().ok_or(Error::MalformedManifest {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let header: Header = serde_json::from_str(header_text).map_err(|e| Error::MalformedManifest {
            line: header_line + 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::MalformedManifest {
                line: header_line + 1,
                message: format!(
                    "unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
                    header.format, header.version
                ),
            });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let record: Record = serde_json::from_str(line).map_err(|e| Error::MalformedManifest {
                line: idx + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(DatasetManifest {
            split: header.split,
            records,
            base_dir: base_dir.into(),
        })
    }

    /// Checks every record invariant. With [`EmotionPolicy::Lenient`], unknown emotions are
    /// rewritten to the vocabulary default. `check_media` also requires referenced files to exist.
    pub fn validate(&mut self, vocab: &EmotionVocabulary, policy: EmotionPolicy, check_media: bool) -> Result<()> {
        let base_dir = self.base_dir.clone();
        for (idx, record) in self.records.iter_mut().enumerate() {
            let tasks = record.tasks().clone();
            if tasks.is_empty() {
                return Err(Error::invariant(idx, "tasks", "record has no task tags"));
            }
            match record {
                Record::Dialogue { dialogue, .. } => {
                    dialogue.check_structure(idx)?;
                    for (t, turn) in dialogue.turns.iter_mut().enumerate() {
                        let field = format!("turns[{t}]");
                        fix_emotions(turn, vocab, policy, idx, &field)?;
                        if turn.speaker == Speaker::User {
                            check_task_fields(turn, &tasks, idx, &field)?;
                            if tasks.contains(&TaskTag::Dialogue) && turn.audio_ref.is_none() {
                                return Err(Error::invariant(
                                    idx,
                                    &format!("{field}.audio_ref"),
                                    "dialogue user turns need audio",
                                ));
                            }
                        }
                        if check_media {
                            check_media_exists(turn, &base_dir)?;
                        }
                    }
                }
                Record::Utterance { utterance, .. } => {
                    if tasks.contains(&TaskTag::Dialogue) {
                        return Err(Error::invariant(
                            idx,
                            "tasks",
                            "standalone utterances cannot carry the dialogue task",
                        ));
                    }
                    if utterance.speaker == Speaker::Ai
                        && (utterance.audio_ref.is_some() || utterance.video_ref.is_some())
                    {
                        return Err(Error::invariant(idx, "utterance", "ai utterances never carry media"));
                    }
                    fix_emotions(utterance, vocab, policy, idx, "utterance")?;
                    check_task_fields(utterance, &tasks, idx, "utterance")?;
                    if check_media {
                        check_media_exists(utterance, &base_dir)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn fix_emotions(
    turn: &mut UtteranceRecord,
    vocab: &EmotionVocabulary,
    policy: EmotionPolicy,
    record: usize,
    field: &str,
) -> Result<()> {
    let fix = |label: &mut String, which: &str| -> Result<()> {
        if vocab.contains(label) {
            return Ok(());
        }
        match policy {
            EmotionPolicy::Strict => Err(Error::invariant(
                record,
                &format!("{field}.{which}"),
                format!("unknown emotion `{label}`"),
            )),
            EmotionPolicy::Lenient => {
                tracing::warn!(record, field, label = %label, "unknown emotion mapped to default");
                *label = vocab.default_label().to_string();
                Ok(())
            }
        }
    };
    fix(&mut turn.emotion, "emotion")?;
    if let Some(e) = turn.metadata.emotion.as_mut() {
        fix(e, "metadata.emotion")?;
    }
    Ok(())
}

fn check_task_fields(turn: &UtteranceRecord, tasks: &BTreeSet<TaskTag>, record: usize, field: &str) -> Result<()> {
    let needs_audio = tasks.contains(&TaskTag::Asr) || tasks.contains(&TaskTag::Ser);
    let needs_video = tasks.contains(&TaskTag::Emr) || tasks.contains(&TaskTag::Emd);
    if needs_audio && turn.audio_ref.is_none() {
        return Err(Error::invariant(
            record,
            &format!("{field}.audio_ref"),
            "asr/ser records need audio",
        ));
    }
    if needs_video && turn.video_ref.is_none() {
        return Err(Error::invariant(
            record,
            &format!("{field}.video_ref"),
            "emr/emd records need video",
        ));
    }
    if tasks.contains(&TaskTag::Emd) && turn.facial_description.as_deref().is_none_or(|d| d.trim().is_empty()) {
        return Err(Error::invariant(
            record,
            &format!("{field}.facial_description"),
            "emd records need a facial description",
        ));
    }
    Ok(())
}

fn check_media_exists(turn: &UtteranceRecord, base: &Path) -> Result<()> {
    for rel in [&turn.audio_ref, &turn.video_ref].into_iter().flatten() {
        let path = base.join(rel);
        if !path.exists() {
            return Err(Error::MissingMedia(path));
        }
    }
    Ok(())
}

/// Loads and fully validates a manifest file, including media existence.
pub fn validate_manifest(path: &Path, vocab: &EmotionVocabulary, policy: EmotionPolicy) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest::parse(&text, base)?;
    manifest.validate(vocab, policy, true)?;
    Ok(manifest)
}
