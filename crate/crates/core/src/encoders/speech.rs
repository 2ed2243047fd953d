//! Speech encoder: log-mel frames to audio features `f_a`.
//!
//! The builtin stem stacks adjacent frame pairs and projects them, which is a kernel-2,
//! stride-2 convolution over time; an odd final frame is paired with a copy of itself, so
//! `T_a = ceil(frames / 2)`.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::FeatureBackbone;
use crate::error::{Error, Result};
use crate::lm::Backbone;
use crate::nn::{join, sinusoidal_positions, Init, LayerNorm, Linear, Param, Parameterized, SelfAttentionBlock};
use crate::preprocess::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_audio: usize,
    pub backbone: Backbone,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        SpeechEncoderConfig {
            n_mels: 80,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_audio: 64,
            backbone: Backbone::TinyBuiltin,
        }
    }
}

impl SpeechEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone == Backbone::ExternalAdapter {
            return Err(Error::Config(
                "external speech backbones are supplied through the FeatureBackbone interface".into(),
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "speech d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_mels == 0 || self.d_audio == 0 {
            return Err(Error::Config("speech encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Output length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(2)
    }
}

/// Fixed affine rescaling of natural-log mel energies to roughly unit range.
pub fn mel_tensor(mel: &FeatureMatrix, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = mel.data.iter().map(|&x| (x.max(-16.0) + 4.0) / 8.0).collect();
    Ok(Tensor::from_vec(data, (mel.rows, mel.cols), device)?)
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub config: SpeechEncoderConfig,
    pub stem: Linear,
    pub blocks: Vec<SelfAttentionBlock>,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl SpeechEncoder {
    pub fn new(config: SpeechEncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(SpeechEncoder {
            stem: Linear::new(2 * config.n_mels, d, true, init)?,
            blocks: (0..config.n_layers)
                .map(|_| SelfAttentionBlock::new(d, config.n_heads, 2, init))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(d, init)?,
            out: Linear::new(d, config.d_audio, true, init)?,
            config,
        })
    }

    /// `(frames, n_mels)` scaled mel rows to `(ceil(frames / 2), d_audio)`.
    pub fn encode(&self, mel: &Tensor) -> Result<Tensor> {
        let (frames, n_mels) = match mel.dims() {
            [f, m] => (*f, *m),
            d => return Err(Error::ShapeMismatch(format!("mel must be a matrix, got {d:?}"))),
        };
        if frames == 0 {
            return Err(Error::EmptyInput("speech encoder"));
        }
        if n_mels != self.config.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} mel bins, got {n_mels}",
                self.config.n_mels
            )));
        }
        let mel = mel.to_dtype(self.stem.weight.var().dtype())?;
        let mel = if frames % 2 == 1 {
            Tensor::cat(&[&mel, &mel.narrow(0, frames - 1, 1)?], 0)?
        } else {
            mel
        };
        let t = self.config.output_len(frames);
        let stacked = mel.reshape((t, 2 * n_mels))?;
        let mut h = self.stem.forward(&stacked)?.gelu()?;
        h = h.broadcast_add(&sinusoidal_positions(t, self.config.d_model, h.dtype(), h.device())?)?;
        for b in &self.blocks {
            h = b.forward(&h, false)?;
        }
        self.out.forward(&self.norm.forward(&h)?)
    }

    pub fn encode_matrix(&self, mel: &FeatureMatrix) -> Result<Tensor> {
        if mel.rows == 0 {
            return Err(Error::EmptyInput("speech encoder"));
        }
        self.encode(&mel_tensor(mel, self.stem.weight.var().device())?)
    }
}

impl FeatureBackbone for SpeechEncoder {
    fn output_dim(&self) -> usize {
        self.config.d_audio
    }

    fn encode(&self, input: &Tensor) -> Result<Tensor> {
        SpeechEncoder::encode(self, input)
    }
}

impl Parameterized for SpeechEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}
