//! Byte-level tokenizer with reserved special tokens.
//!
//! Ids `0..=255` are raw bytes. Special tokens follow; each has a marker string such as
//! `<|eos|>` that [`Tokenizer::encode`] recognizes, while [`Tokenizer::encode_text`] never
//! produces a special id.

use serde::{Deserialize, Serialize};

pub const BYTE_TOKENS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    AudioBegin,
    AudioEnd,
    VideoBegin,
    VideoEnd,
    EmoBegin,
    EmoEnd,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::AudioBegin,
        Special::AudioEnd,
        Special::VideoBegin,
        Special::VideoEnd,
        Special::EmoBegin,
        Special::EmoEnd,
    ];

    pub fn id(self) -> u32 {
        BYTE_TOKENS + Special::ALL.iter().position(|s| *s == self).expect("listed") as u32
    }

    pub fn marker(self) -> &'static str {
        match self {
            Special::Bos => "<|bos|>",
            Special::Eos => "<|eos|>",
            Special::Pad => "<|pad|>",
            Special::AudioBegin => "<|audio_begin|>",
            Special::AudioEnd => "<|audio_end|>",
            Special::VideoBegin => "<|video_begin|>",
            Special::VideoEnd => "<|video_end|>",
            Special::EmoBegin => "<|emo_begin|>",
            Special::EmoEnd => "<|emo_end|>",
        }
    }

    pub fn from_id(id: u32) -> Option<Special> {
        id.checked_sub(BYTE_TOKENS)
            .and_then(|i| Special::ALL.get(i as usize).copied())
    }
}

/// Serializable description stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub kind: String,
    pub vocab_size: usize,
    pub specials: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        BYTE_TOKENS as usize + Special::ALL.len()
    }

    pub fn spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            kind: "byte".into(),
            vocab_size: self.vocab_size(),
            specials: Special::ALL.iter().map(|s| s.marker().to_string()).collect(),
        }
    }

    /// Ordinary text; never yields special ids.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Text that may contain special-token markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if rest.starts_with("<|") {
                for s in Special::ALL {
                    if let Some(tail) = rest.strip_prefix(s.marker()) {
                        out.push(s.id());
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            let ch = rest.chars().next().expect("non-empty");
            out.extend(self.encode_text(&rest[..ch.len_utf8()]));
            rest = &rest[ch.len_utf8()..];
        }
        out
    }

    /// Inverse of [`Tokenizer::encode`]; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if id < BYTE_TOKENS {
                bytes.push(id as u8);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            match Special::from_id(id) {
                Some(s) => out.push_str(s.marker()),
                None => out.push('\u{fffd}'),
            }
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct_and_reserved() {
        let t = Tokenizer;
        let mut ids: Vec<u32> = Special::ALL.iter().map(|s| s.id()).collect();
        ids.dedup();
        assert_eq!(ids.len(), Special::ALL.len());
        assert_eq!(t.vocab_size(), 265);
        let text = "<|eos|> plain <|emo_begin|>";
        assert!(t.encode_text(text).iter().all(|&i| i < BYTE_TOKENS));
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tokenizer;
        let s = "<|emo_begin|>happy<|emo_end|>Glad, naïve <| not a marker<|eos|>";
        let ids = t.encode(s);
        assert_eq!(ids[0], Special::EmoBegin.id());
        assert_eq!(*ids.last().unwrap(), Special::Eos.id());
        assert_eq!(t.decode(&ids), s);
    }
}
