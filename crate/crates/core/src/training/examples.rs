//! Per-stage training sequences built from records, prompts and encoded features.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::lm::{assemble_input, MixedSequence, PromptPart, Special, Tokenizer};
use crate::manifest::{DatasetManifest, TaskTag};
use crate::prompts::{
    format_ai_target, AiSlot, FaceTask, Modality, Prompt, PromptSet, RoundSlots, SerTarget, SpeechTask, UserSlot,
};
use crate::types::{Dialogue, EmotionVocabulary, Speaker, UtteranceRecord};

/// Separator between the transcript and the emotion clauses of a stage-1 target.
pub const SER_SEPARATOR: &str = " | ";

/// Everything example builders need besides the record itself.
#[derive(Clone, Copy)]
pub struct ExampleContext<'a> {
    pub prompts: &'a PromptSet,
    pub vocab: &'a EmotionVocabulary,
    pub tokenizer: &'a Tokenizer,
    pub context_len: usize,
    pub visual_first: bool,
    pub ser_target: SerTarget,
}

/// Transcript alone, or transcript followed by the emotion and metadata clauses.
pub fn speech_target(rec: &UtteranceRecord, task: SpeechTask, ser: SerTarget) -> Result<String> {
    if rec.transcript.is_empty() {
        return Err(Error::MissingField("transcript"));
    }
    match task {
        SpeechTask::Asr => Ok(rec.transcript.clone()),
        SpeechTask::AsrSer => {
            if rec.emotion.is_empty() {
                return Err(Error::MissingField("emotion"));
            }
            Ok(format!(
                "{}{SER_SEPARATOR}{}",
                rec.transcript,
                ser.render(&rec.emotion, &rec.metadata)
            ))
        }
    }
}

/// The label, or the label followed by the facial-dynamics description.
pub fn face_target(rec: &UtteranceRecord, task: FaceTask) -> Result<String> {
    if rec.emotion.is_empty() {
        return Err(Error::MissingField("emotion"));
    }
    match task {
        FaceTask::Emr => Ok(rec.emotion.clone()),
        FaceTask::EmrEmd => match rec.facial_description.as_deref() {
            Some(d) if !d.is_empty() => Ok(format!("{}. {d}", rec.emotion)),
            _ => Err(Error::MissingField("facial_description")),
        },
    }
}

pub fn build_stage1_example(
    rec: &UtteranceRecord,
    task: SpeechTask,
    audio: &Tensor,
    ctx: &ExampleContext<'_>,
) -> Result<MixedSequence> {
    if rec.audio_ref.is_none() {
        return Err(Error::MissingField("audio_ref"));
    }
    let target = speech_target(rec, task, ctx.ser_target)?;
    let prompt = ctx.prompts.build_stage1_prompt(task, Some(&target));
    assemble_input(
        &prompt.parts,
        std::slice::from_ref(audio),
        &[],
        ctx.tokenizer,
        ctx.context_len,
    )
}

pub fn build_stage2_example(
    rec: &UtteranceRecord,
    task: FaceTask,
    visual: &Tensor,
    ctx: &ExampleContext<'_>,
) -> Result<MixedSequence> {
    if rec.video_ref.is_none() {
        return Err(Error::MissingField("video_ref"));
    }
    let target = face_target(rec, task)?;
    let prompt = ctx.prompts.build_stage2_prompt(task, Some(&target));
    assemble_input(
        &prompt.parts,
        &[],
        std::slice::from_ref(visual),
        ctx.tokenizer,
        ctx.context_len,
    )
}

/// Encoded inputs of one user turn.
#[derive(Debug, Clone, Default)]
pub struct TurnFeatures {
    pub audio: Option<Tensor>,
    pub video: Option<Tensor>,
}

/// One round of dialogue material ready for assembly.
#[derive(Debug, Clone)]
pub struct DialogueRound<'a> {
    pub transcript: &'a str,
    pub features: TurnFeatures,
    pub ai: AiSlot<'a>,
}

#[derive(Debug, Clone)]
pub struct AssembledDialogue {
    pub sequence: MixedSequence,
    pub prompt: Prompt,
    /// Oldest rounds left out to fit the context.
    pub dropped: usize,
}

/// Stage-3 layout of `rounds` under `modality`, dropping the oldest whole rounds until the
/// sequence plus `reserve` positions fits the context. A single round that cannot fit is a
/// [`Error::ContextOverflow`].
pub fn assemble_dialogue(
    rounds: &[DialogueRound<'_>],
    modality: Modality,
    reserve: usize,
    ctx: &ExampleContext<'_>,
) -> Result<AssembledDialogue> {
    if rounds.is_empty() {
        return Err(Error::EmptyInput("dialogue"));
    }
    let limit = ctx.context_len.saturating_sub(reserve);
    let mut last_err = None;
    for start in 0..rounds.len() {
        match assemble_rounds(&rounds[start..], modality, limit, ctx) {
            Ok((sequence, prompt)) => {
                return Ok(AssembledDialogue {
                    sequence,
                    prompt,
                    dropped: start,
                })
            }
            Err(e @ Error::ContextOverflow { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn assemble_rounds(
    rounds: &[DialogueRound<'_>],
    modality: Modality,
    limit: usize,
    ctx: &ExampleContext<'_>,
) -> Result<(MixedSequence, Prompt)> {
    let mut audio = Vec::new();
    let mut video = Vec::new();
    let mut slots = Vec::with_capacity(rounds.len());
    for r in rounds {
        let mut user = UserSlot::default();
        if modality.text {
            if r.transcript.is_empty() {
                return Err(Error::MissingField("transcript"));
            }
            user.transcript = Some(r.transcript);
        }
        if modality.audio {
            let f = r.features.audio.as_ref().ok_or(Error::MissingField("audio_ref"))?;
            user.audio = Some(audio.len());
            audio.push(f.clone());
        }
        if modality.video {
            let f = r.features.video.as_ref().ok_or(Error::MissingField("video_ref"))?;
            user.video = Some(video.len());
            video.push(f.clone());
        }
        slots.push(RoundSlots { user, ai: r.ai });
    }
    let prompt = ctx.prompts.build_stage3_prompt(&slots, ctx.vocab, ctx.visual_first)?;
    let seq = assemble_input(&prompt.parts, &audio, &video, ctx.tokenizer, limit)?;
    Ok((seq, prompt))
}

/// Whole-dialogue training sequence with every AI turn as a target.
pub fn build_stage3_example(
    d: &Dialogue,
    modality: Modality,
    features: &mut dyn FnMut(&UtteranceRecord) -> Result<TurnFeatures>,
    ctx: &ExampleContext<'_>,
) -> Result<AssembledDialogue> {
    let mut rounds = Vec::with_capacity(d.rounds());
    for r in d.split_rounds() {
        if modality.audio && r.user.audio_ref.is_none() {
            return Err(Error::MissingField("audio_ref"));
        }
        if modality.video && r.user.video_ref.is_none() {
            return Err(Error::MissingField("video_ref"));
        }
        let features = if modality.audio || modality.video {
            features(r.user)?
        } else {
            TurnFeatures::default()
        };
        rounds.push(DialogueRound {
            transcript: &r.user.transcript,
            features,
            ai: AiSlot::Target {
                emotion: &r.ai.emotion,
                text: &r.ai.transcript,
            },
        });
    }
    assemble_dialogue(&rounds, modality, 0, ctx)
}

/// Text-only warm-up material: transcripts, tagged AI replies and facial descriptions, each
/// as one target sequence ending in `eos`.
pub fn warmup_texts(manifest: &DatasetManifest, vocab: &EmotionVocabulary, ser: SerTarget) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut push = |s: String| {
        if !s.is_empty() && seen.insert(s.clone()) {
            out.push(s);
        }
    };
    for r in &manifest.records {
        let turns: Vec<&UtteranceRecord> = match r {
            crate::manifest::Record::Dialogue { dialogue, .. } => dialogue.turns.iter().collect(),
            crate::manifest::Record::Utterance { utterance, .. } => vec![utterance],
        };
        for t in turns {
            match t.speaker {
                Speaker::User => {
                    push(t.transcript.clone());
                    // Metadata alone, so the label is never tied to a particular transcript.
                    if r.tasks().contains(&TaskTag::Ser) && !t.emotion.is_empty() {
                        push(ser.render(&t.emotion, &t.metadata));
                    }
                    if r.tasks().contains(&TaskTag::Emd) {
                        if let Some(d) = &t.facial_description {
                            push(d.clone());
                        }
                    }
                }
                Speaker::Ai => push(format_ai_target(&t.emotion, &t.transcript, vocab)?),
            }
        }
    }
    Ok(out)
}

pub fn build_warmup_example(text: &str, ctx: &ExampleContext<'_>) -> Result<MixedSequence> {
    let parts = [PromptPart::Target(format!("{text}{}", Special::Eos.marker()))];
    assemble_input(&parts, &[], &[], ctx.tokenizer, ctx.context_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SpeakerMetadata;
    use candle_core::{DType, Device};

    fn user(emotion: &str) -> UtteranceRecord {
        UtteranceRecord {
            speaker: Speaker::User,
            transcript: "I watched the game today.".into(),
            emotion: emotion.into(),
            audio_ref: Some("a.wav".into()),
            video_ref: Some("v".into()),
            metadata: SpeakerMetadata::default(),
            facial_description: None,
        }
    }

    fn feats(rows: usize) -> Tensor {
        Tensor::zeros((rows, 4), DType::F32, &Device::Cpu).unwrap()
    }

    fn with_ctx<T>(context_len: usize, f: impl FnOnce(&ExampleContext<'_>) -> T) -> T {
        let prompts = PromptSet::builtin();
        let vocab = EmotionVocabulary::default();
        let tok = Tokenizer;
        f(&ExampleContext {
            prompts: &prompts,
            vocab: &vocab,
            tokenizer: &tok,
            context_len,
            visual_first: false,
            ser_target: SerTarget::default(),
        })
    }

    fn target_text(seq: &MixedSequence) -> String {
        let toks: Vec<u32> = seq
            .position_tokens()
            .into_iter()
            .zip(seq.target_mask())
            .filter(|(_, m)| *m)
            .map(|(t, _)| t)
            .collect();
        Tokenizer.decode(&toks)
    }

    #[test]
    fn stage1_targets() {
        with_ctx(4096, |ctx| {
            let rec = user("sad");
            let asr = build_stage1_example(&rec, SpeechTask::Asr, &feats(3), ctx).unwrap();
            assert_eq!(target_text(&asr), "I watched the game today.<|eos|>");
            let ser = build_stage1_example(&rec, SpeechTask::AsrSer, &feats(3), ctx).unwrap();
            assert_eq!(target_text(&ser), "I watched the game today. | emotion: sad<|eos|>");
            let rec = user("");
            assert!(matches!(
                build_stage1_example(&rec, SpeechTask::AsrSer, &feats(3), ctx),
                Err(Error::MissingField("emotion"))
            ));
        });
    }

    #[test]
    fn stage2_targets() {
        with_ctx(4096, |ctx| {
            let mut rec = user("sad");
            let emr = build_stage2_example(&rec, FaceTask::Emr, &feats(2), ctx).unwrap();
            assert_eq!(target_text(&emr), "sad<|eos|>");
            assert!(matches!(
                build_stage2_example(&rec, FaceTask::EmrEmd, &feats(2), ctx),
                Err(Error::MissingField("facial_description"))
            ));
            rec.facial_description = Some("The brows draw together. The gaze lowers.".into());
            let emd = build_stage2_example(&rec, FaceTask::EmrEmd, &feats(2), ctx).unwrap();
            assert_eq!(
                target_text(&emd),
                "sad. The brows draw together. The gaze lowers.<|eos|>"
            );
        });
    }

    fn dialogue(rounds: usize) -> Dialogue {
        let mut turns = Vec::new();
        for _ in 0..rounds {
            turns.push(user("happy"));
            turns.push(UtteranceRecord::ai("happy", "Great news!"));
        }
        Dialogue::new("d", turns).unwrap()
    }

    #[test]
    fn stage3_masks_every_ai_turn() {
        with_ctx(4096, |ctx| {
            let d = dialogue(2);
            let mut f = |_: &UtteranceRecord| {
                Ok(TurnFeatures {
                    audio: Some(feats(3)),
                    video: Some(feats(2)),
                })
            };
            let ex = build_stage3_example(&d, Modality::AUDIO_VISUAL, &mut f, ctx).unwrap();
            assert_eq!(ex.dropped, 0);
            assert_eq!(ex.sequence.audio_spans(), 2);
            assert_eq!(ex.sequence.visual_spans(), 2);
            let one = "<|emo_begin|>happy<|emo_end|>Great news!<|eos|>";
            assert_eq!(target_text(&ex.sequence), format!("{one}{one}"));

            let audio_only = build_stage3_example(&d, Modality::AUDIO, &mut f, ctx).unwrap();
            assert_eq!(audio_only.sequence.visual_spans(), 0);

            let text = build_stage3_example(&d, Modality::TEXT, &mut f, ctx).unwrap();
            assert_eq!(text.sequence.audio_spans() + text.sequence.visual_spans(), 0);
            assert!(text.prompt.render_text().contains("User: I watched the game today."));
        });
    }

    #[test]
    fn stage3_drops_oldest_rounds_then_overflows() {
        let d = dialogue(3);
        let mut f = |_: &UtteranceRecord| {
            Ok(TurnFeatures {
                audio: Some(feats(3)),
                video: None,
            })
        };
        let full = with_ctx(4096, |ctx| {
            build_stage3_example(&d, Modality::AUDIO, &mut f, ctx).unwrap()
        });
        let ex = with_ctx(full.sequence.total_len() - 1, |ctx| {
            build_stage3_example(&d, Modality::AUDIO, &mut f, ctx).unwrap()
        });
        assert_eq!(ex.dropped, 1);
        assert_eq!(ex.prompt.target_count(), 2);
        let err = with_ctx(40, |ctx| build_stage3_example(&d, Modality::AUDIO, &mut f, ctx));
        assert!(matches!(err, Err(Error::ContextOverflow { .. })));
        let mut missing = |_: &UtteranceRecord| Ok(TurnFeatures::default());
        let err = with_ctx(4096, |ctx| build_stage3_example(&d, Modality::AUDIO, &mut missing, ctx));
        assert!(matches!(err, Err(Error::MissingField("audio_ref"))));
    }
}
