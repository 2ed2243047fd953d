//! Decoder language model with feature projections, scoring and generation.

pub mod decoder;
pub mod lora;
pub mod sequence;
pub mod tokenizer;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{Backbone, Decoder, DecoderConfig};
pub use lora::{lora_apply, lora_merge, LoraAdapter, LoraConfig};
pub use sequence::{assemble_input, MixedSequence, PromptPart, Segment};
pub use tokenizer::{Special, Tokenizer};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Audio,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    TopP { p: f64, temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated tokens, without the terminating `eos`.
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
}

/// Decoder plus the affine maps that bring encoder rows into its embedding space.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub tokenizer: Tokenizer,
    pub decoder: Decoder,
    pub audio_proj: Linear,
    pub visual_proj: Linear,
}

impl LanguageModel {
    pub fn new(config: DecoderConfig, d_audio: usize, d_visual: usize, init: &mut Init) -> Result<Self> {
        let tokenizer = Tokenizer;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "decoder vocabulary {} does not match tokenizer vocabulary {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let d = config.d_model;
        Ok(LanguageModel {
            tokenizer,
            decoder: Decoder::new(config, init)?,
            audio_proj: Linear::new(d_audio, d, true, init)?,
            visual_proj: Linear::new(d_visual, d, true, init)?,
        })
    }

    pub fn context_len(&self) -> usize {
        self.decoder.config.context_len
    }

    pub fn dtype(&self) -> DType {
        self.decoder.dtype()
    }

    /// Affine projection of encoder rows into the decoder embedding space.
    pub fn project_features(&self, f: &Tensor, kind: FeatureKind) -> Result<Tensor> {
        if f.dims().first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyInput("feature projection"));
        }
        let f = f.to_dtype(self.dtype())?;
        match kind {
            FeatureKind::Audio => self.audio_proj.forward(&f),
            FeatureKind::Visual => self.visual_proj.forward(&f),
        }
    }

    /// Embedding rows `(T, d_model)` for a sequence.
    pub fn embed(&self, seq: &MixedSequence) -> Result<Tensor> {
        if seq.segments.is_empty() {
            return Err(Error::EmptyInput("sequence"));
        }
        let mut parts = Vec::with_capacity(seq.segments.len());
        for seg in &seq.segments {
            match seg {
                Segment::Text { tokens, .. } => parts.push(self.decoder.embed_tokens(tokens)?),
                Segment::Audio(f) => {
                    parts.push(self.decoder.embed_tokens(&[Special::AudioBegin.id()])?);
                    parts.push(self.project_features(f, FeatureKind::Audio)?);
                    parts.push(self.decoder.embed_tokens(&[Special::AudioEnd.id()])?);
                }
                Segment::Visual(f) => {
                    parts.push(self.decoder.embed_tokens(&[Special::VideoBegin.id()])?);
                    parts.push(self.project_features(f, FeatureKind::Visual)?);
                    parts.push(self.decoder.embed_tokens(&[Special::VideoEnd.id()])?);
                }
            }
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// `T + 1` log-probability rows; row `t` conditions only on positions before `t`.
    pub fn score(&self, seq: &MixedSequence) -> Result<Tensor> {
        self.decoder.score_embeddings(&self.embed(seq)?)
    }

    pub fn generate(&self, prefix: &MixedSequence, decoding: &Decoding, max_new: usize) -> Result<Generation> {
        self.generate_until(prefix, decoding, max_new, None)
    }

    /// [`LanguageModel::generate`] that gives up with [`Error::GenerationTimeout`] once
    /// `deadline` passes.
    pub fn generate_until(
        &self,
        prefix: &MixedSequence,
        decoding: &Decoding,
        max_new: usize,
        deadline: Option<std::time::Instant>,
    ) -> Result<Generation> {
        let needed = prefix.total_len() + 1 + max_new;
        if needed > self.context_len() {
            return Err(Error::ContextOverflow {
                len: needed,
                limit: self.context_len(),
            });
        }
        let mut out = Generation {
            tokens: Vec::new(),
            hit_eos: false,
        };
        if max_new == 0 {
            return Ok(out);
        }
        let mut rng = match decoding {
            Decoding::TopP { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            Decoding::Greedy => None,
        };
        let (mut caches, mut logp, mut pos) = self.decoder.start(&self.embed(prefix)?)?;
        loop {
            let row: Vec<f32> = logp.to_dtype(DType::F32)?.to_vec1()?;
            let token = match (decoding, rng.as_mut()) {
                (Decoding::TopP { p, temperature, .. }, Some(rng)) => sample_top_p(&row, *p, *temperature, rng)?,
                _ => argmax(&row),
            };
            if token == Special::Eos.id() {
                out.hit_eos = true;
                break;
            }
            out.tokens.push(token);
            if out.tokens.len() == max_new {
                break;
            }
            if deadline.is_some_and(|d| std::time::Instant::now() >= d) {
                return Err(Error::GenerationTimeout);
            }
            logp = self.decoder.step(&mut caches, token, pos)?;
            pos += 1;
        }
        Ok(out)
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Nucleus sampling from a log-probability row.
pub fn sample_top_p(logp: &[f32], p: f64, temperature: f64, rng: &mut impl Rng) -> Result<u32> {
    if !(p > 0.0 && p <= 1.0) || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "top-p needs 0 < p <= 1 and temperature > 0, got p={p}, temperature={temperature}"
        )));
    }
    let max = logp.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<(usize, f64)> = logp
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l as f64 - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|x| x.1).sum();
    probs.iter_mut().for_each(|x| x.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for (_, q) in &probs {
        kept += 1;
        mass += q;
        if mass >= p {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let mut u = rng.random::<f64>() * mass;
    for (i, q) in nucleus {
        if u < *q {
            return Ok(*i as u32);
        }
        u -= q;
    }
    Ok(nucleus[kept - 1].0 as u32)
}

impl Parameterized for LanguageModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.audio_proj.visit_params(&join(prefix, "projector.audio"), f);
        self.visual_proj.visit_params(&join(prefix, "projector.visual"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
        self.audio_proj.visit_params_mut(&join(prefix, "projector.audio"), f);
        self.visual_proj.visit_params_mut(&join(prefix, "projector.visual"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> (LanguageModel, Init) {
        let mut init = Init::new(2, DType::F32, Device::Cpu);
        let cfg = DecoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 128,
            ..DecoderConfig::default()
        };
        (LanguageModel::new(cfg, 6, 5, &mut init).unwrap(), init)
    }

    #[test]
    fn projection_of_zeros_repeats_the_bias() {
        let (lm, init) = tiny();
        let b = lm.audio_proj.bias.as_ref().unwrap();
        b.set(&Tensor::arange(0f32, 16., &Device::Cpu).unwrap()).unwrap();
        let out = lm
            .project_features(&init.zeros(&[3, 6]).unwrap(), FeatureKind::Audio)
            .unwrap();
        assert_eq!(out.dims(), &[3, 16]);
        for row in out.to_vec2::<f32>().unwrap() {
            assert_eq!(row, (0..16).map(|i| i as f32).collect::<Vec<_>>());
        }
        assert!(lm
            .project_features(&init.zeros(&[0, 6]).unwrap(), FeatureKind::Audio)
            .is_err());
    }

    #[test]
    fn point_mass_and_determinism() {
        let (lm, _) = tiny();
        let mut seq = MixedSequence::new();
        seq.push_text(lm.tokenizer.encode_text("hello"), false);
        let g1 = lm.generate(&seq, &Decoding::Greedy, 5).unwrap();
        assert_eq!(g1, lm.generate(&seq, &Decoding::Greedy, 5).unwrap());
        assert!(lm.generate(&seq, &Decoding::Greedy, 0).unwrap().tokens.is_empty());
        let top = Decoding::TopP {
            p: 0.9,
            temperature: 1.0,
            seed: 4,
        };
        assert_eq!(lm.generate(&seq, &top, 5).unwrap(), lm.generate(&seq, &top, 5).unwrap());

        let mut bias = vec![0f32; lm.decoder.config.vocab_size];
        bias[b'z' as usize] = 1e4;
        lm.decoder
            .head
            .bias
            .as_ref()
            .unwrap()
            .set(&Tensor::new(bias, &Device::Cpu).unwrap())
            .unwrap();
        let g = lm.generate(&seq, &Decoding::Greedy, 3).unwrap();
        assert_eq!(g.tokens, vec![b'z' as u32; 3]);
        assert!(!g.hit_eos);
    }

    #[test]
    fn context_overflow_is_reported() {
        let (lm, _) = tiny();
        let mut seq = MixedSequence::new();
        seq.push_text(vec![1; 120], false);
        assert!(matches!(
            lm.generate(&seq, &Decoding::Greedy, 10),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn top_p_keeps_the_nucleus() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logp: Vec<f32> = [0.7f32, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        for _ in 0..50 {
            assert_eq!(sample_top_p(&logp, 0.5, 1.0, &mut rng).unwrap(), 0);
            assert_ne!(sample_top_p(&logp, 0.85, 1.0, &mut rng).unwrap(), 2);
        }
    }
}
