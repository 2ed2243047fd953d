//! Mixed text/feature sequences and their assembly from prompt parts.

use candle_core::Tensor;

use super::tokenizer::{Special, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Segment {
    Text {
        tokens: Vec<u32>,
        target: bool,
    },
    /// Raw speech-encoder rows; embedded between `audio_begin` and `audio_end`.
    Audio(Tensor),
    /// Raw face-encoder rows; embedded between `video_begin` and `video_end`.
    Visual(Tensor),
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Text { tokens, .. } => tokens.len(),
            Segment::Audio(t) | Segment::Visual(t) => t.dims().first().copied().unwrap_or(0) + 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segments. Every embedded position has a token id (pad for feature rows) and a mask
/// flag; the mask is true only on target text.
#[derive(Debug, Clone, Default)]
pub struct MixedSequence {
    pub segments: Vec<Segment>,
}

impl MixedSequence {
    pub fn new() -> Self {
        MixedSequence::default()
    }

    pub fn push_text(&mut self, tokens: Vec<u32>, target: bool) {
        if tokens.is_empty() {
            return;
        }
        if let Some(Segment::Text {
            tokens: prev,
            target: t,
        }) = self.segments.last_mut()
        {
            if *t == target {
                prev.extend(tokens);
                return;
            }
        }
        self.segments.push(Segment::Text { tokens, target });
    }

    pub fn push_audio(&mut self, features: Tensor) -> Result<()> {
        check_rows(&features, "audio span")?;
        self.segments.push(Segment::Audio(features));
        Ok(())
    }

    pub fn push_visual(&mut self, features: Tensor) -> Result<()> {
        check_rows(&features, "visual span")?;
        self.segments.push(Segment::Visual(features));
        Ok(())
    }

    pub fn extend(&mut self, other: MixedSequence) {
        for seg in other.segments {
            match seg {
                Segment::Text { tokens, target } => self.push_text(tokens, target),
                s => self.segments.push(s),
            }
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn target_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in &self.segments {
            match seg {
                Segment::Text { tokens, target } => out.extend(std::iter::repeat_n(*target, tokens.len())),
                s => out.extend(std::iter::repeat_n(false, s.len())),
            }
        }
        out
    }

    /// Token id per position; feature rows carry `pad`.
    pub fn position_tokens(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in &self.segments {
            match seg {
                Segment::Text { tokens, .. } => out.extend_from_slice(tokens),
                Segment::Audio(t) => span_tokens(&mut out, t, Special::AudioBegin, Special::AudioEnd),
                Segment::Visual(t) => span_tokens(&mut out, t, Special::VideoBegin, Special::VideoEnd),
            }
        }
        out
    }

    /// Whether position `i` is a feature row rather than a token.
    pub fn feature_positions(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total_len());
        for seg in &self.segments {
            match seg {
                Segment::Text { tokens, .. } => out.extend(std::iter::repeat_n(false, tokens.len())),
                s => {
                    out.push(false);
                    out.extend(std::iter::repeat_n(true, s.len() - 2));
                    out.push(false);
                }
            }
        }
        out
    }

    pub fn audio_spans(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Audio(_))).count()
    }

    pub fn visual_spans(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Visual(_))).count()
    }

    pub fn check_context(&self, limit: usize) -> Result<()> {
        let len = self.total_len();
        if len > limit {
            return Err(Error::ContextOverflow { len, limit });
        }
        Ok(())
    }
}

fn span_tokens(out: &mut Vec<u32>, t: &Tensor, begin: Special, end: Special) {
    out.push(begin.id());
    out.extend(std::iter::repeat_n(Special::Pad.id(), t.dims()[0]));
    out.push(end.id());
}

fn check_rows(t: &Tensor, what: &'static str) -> Result<()> {
    match t.dims() {
        [0, _] => Err(Error::EmptyInput(what)),
        [_, _] => Ok(()),
        d => Err(Error::ShapeMismatch(format!("{what} must be a matrix, got {d:?}"))),
    }
}

/// One slot of a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPart {
    /// Conditioning text; special-token markers are recognized.
    Text(String),
    /// Index into the audio feature list.
    Audio(usize),
    /// Index into the visual feature list.
    Video(usize),
    /// Text that incurs loss.
    Target(String),
}

/// Turns rendered prompt parts plus features into a sequence, checking the context limit.
pub fn assemble_input(
    parts: &[PromptPart],
    audio: &[Tensor],
    visual: &[Tensor],
    tokenizer: &Tokenizer,
    context_len: usize,
) -> Result<MixedSequence> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let mut seq = MixedSequence::new();
    for part in parts {
        match part {
            PromptPart::Text(s) => seq.push_text(tokenizer.encode(s), false),
            PromptPart::Target(s) => seq.push_text(tokenizer.encode(s), true),
            PromptPart::Audio(i) => seq.push_audio(
                audio
                    .get(*i)
                    .ok_or_else(|| Error::Precondition(format!("prompt references missing audio feature {i}")))?
                    .clone(),
            )?,
            PromptPart::Video(i) => seq.push_visual(
                visual
                    .get(*i)
                    .ok_or_else(|| Error::Precondition(format!("prompt references missing video feature {i}")))?
                    .clone(),
            )?,
        }
    }
    seq.check_context(context_len)?;
    Ok(seq)
}
