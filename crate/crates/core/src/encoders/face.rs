//! Face encoder: a frame-local encoder followed by learnable-query temporal pooling.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Backbone;
use crate::nn::{
    join, sinusoidal_positions, Attention, FeedForward, Init, LayerNorm, Linear, Param, ParamKind, Parameterized,
};
use crate::preprocess::video::{CROP_CHANNELS, CROP_SIZE};
use crate::preprocess::FaceCropSequence;

/// Side of the pooled grid each crop is reduced to before the frame MLP.
pub const POOL_GRID: usize = 8;
const POOLED_LEN: usize = POOL_GRID * POOL_GRID * CROP_CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEncoderConfig {
    pub frame_backbone: Backbone,
    pub d_frame: usize,
    pub n_queries: usize,
    pub d_visual: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    /// Add sinusoidal positions to frame features before cross-attention.
    pub positional: bool,
}

impl Default for FaceEncoderConfig {
    fn default() -> Self {
        FaceEncoderConfig {
            frame_backbone: Backbone::TinyBuiltin,
            d_frame: 64,
            n_queries: 128,
            d_visual: 64,
            temporal_layers: 6,
            temporal_heads: 8,
            positional: true,
        }
    }
}

impl FaceEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_backbone == Backbone::ExternalAdapter {
            return Err(Error::Config(
                "external frame backbones are supplied through the FeatureBackbone interface".into(),
            ));
        }
        if self.n_queries == 0 || self.d_frame == 0 {
            return Err(Error::Config(
                "face encoder needs at least one query and a positive width".into(),
            ));
        }
        if self.temporal_heads == 0 || !self.d_visual.is_multiple_of(self.temporal_heads) {
            return Err(Error::Config(format!(
                "d_visual {} is not divisible by {} temporal heads",
                self.d_visual, self.temporal_heads
            )));
        }
        Ok(())
    }
}

/// Crops as `(N, 192)`: normalized pixels average-pooled over 12x12 blocks.
pub fn pooled_crops(crops: &FaceCropSequence, device: &Device) -> Result<Tensor> {
    let n = crops.len();
    if n == 0 {
        return Err(Error::EmptyInput("frame encoder"));
    }
    let block = CROP_SIZE / POOL_GRID;
    let pixels = Tensor::from_slice(&crops.crops, (n, CROP_SIZE, CROP_SIZE, CROP_CHANNELS), device)?;
    let pixels = ((pixels - 0.5)? * 4.0)?;
    let pooled = pixels
        .reshape((n, POOL_GRID, block, POOL_GRID, block, CROP_CHANNELS))?
        .mean(4)?
        .mean(2)?;
    Ok(pooled.reshape((n, POOLED_LEN))?)
}

/// Two-layer MLP applied to each pooled crop independently.
#[derive(Debug, Clone)]
pub struct FrameEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl FrameEncoder {
    pub fn new(d_frame: usize, init: &mut Init) -> Result<Self> {
        Ok(FrameEncoder {
            hidden: Linear::new(POOLED_LEN, 2 * d_frame, true, init)?,
            out: Linear::new(2 * d_frame, d_frame, true, init)?,
        })
    }

    pub fn forward_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        if pooled.dim(0)? == 0 {
            return Err(Error::EmptyInput("frame encoder"));
        }
        let pooled = pooled.to_dtype(self.hidden.weight.var().dtype())?;
        self.out.forward(&self.hidden.forward(&pooled)?.gelu()?)
    }

    /// One `d_frame` row per crop; row `i` depends only on crop `i`.
    pub fn encode_frames(&self, crops: &FaceCropSequence) -> Result<Tensor> {
        self.forward_pooled(&pooled_crops(crops, self.hidden.weight.var().device())?)
    }
}

impl Parameterized for FrameEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone)]
pub struct LearnableQueries {
    pub values: Param,
}

impl LearnableQueries {
    /// Unit normal draws scaled by `1 / sqrt(d_visual)`.
    pub fn new(n_queries: usize, d_visual: usize, init: &mut Init) -> Result<Self> {
        Ok(LearnableQueries {
            values: Param::new(
                init.normal(&[n_queries, d_visual], 1.0 / (d_visual as f64).sqrt())?,
                ParamKind::Query,
            )?,
        })
    }
}

impl Parameterized for LearnableQueries {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "values"), &self.values);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "values"), &mut self.values);
    }
}

/// Pre-norm block: queries cross-attend to frames, then a feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl CrossBlock {
    fn new(d: usize, heads: usize, init: &mut Init) -> Result<Self> {
        Ok(CrossBlock {
            norm_q: LayerNorm::new(d, init)?,
            norm_kv: LayerNorm::new(d, init)?,
            attn: Attention::new(d, heads, init)?,
            norm_ff: LayerNorm::new(d, init)?,
            ff: FeedForward::new(d, 2 * d, init)?,
        })
    }

    fn forward(&self, q: &Tensor, frames: &Tensor) -> Result<Tensor> {
        let kv = self.norm_kv.forward(frames)?;
        let q = (q + self.attn.forward(&self.norm_q.forward(q)?, &kv, false)?)?;
        Ok((&q + self.ff.forward(&self.norm_ff.forward(&q)?)?)?)
    }
}

impl Parameterized for CrossBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.norm_q.visit_params(&join(prefix, "norm_q"), f);
        self.norm_kv.visit_params(&join(prefix, "norm_kv"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm_ff.visit_params(&join(prefix, "norm_ff"), f);
        self.ff.visit_params(&join(prefix, "ff"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.norm_q.visit_params_mut(&join(prefix, "norm_q"), f);
        self.norm_kv.visit_params_mut(&join(prefix, "norm_kv"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm_ff.visit_params_mut(&join(prefix, "norm_ff"), f);
        self.ff.visit_params_mut(&join(prefix, "ff"), f);
    }
}

/// Queries refined layer by layer; each layer attends to the same frame features.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub input: Linear,
    pub blocks: Vec<CrossBlock>,
    pub final_norm: LayerNorm,
    pub positional: bool,
}

impl TemporalEncoder {
    pub fn new(cfg: &FaceEncoderConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.d_visual;
        Ok(TemporalEncoder {
            input: Linear::new(cfg.d_frame, d, true, init)?,
            blocks: (0..cfg.temporal_layers)
                .map(|_| CrossBlock::new(d, cfg.temporal_heads, init))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(d, init)?,
            positional: cfg.positional,
        })
    }
}

impl Parameterized for TemporalEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.input.visit_params(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.input.visit_params_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_params_mut(&join(prefix, "final_norm"), f);
    }
}

/// Fixed-length visual feature `(n_queries, d_visual)` from `(N, d_frame)` frame features.
pub fn temporal_pool(frame_features: &Tensor, queries: &LearnableQueries, encoder: &TemporalEncoder) -> Result<Tensor> {
    let n = match frame_features.dims() {
        [n, _] => *n,
        d => {
            return Err(Error::ShapeMismatch(format!(
                "frame features must be a matrix, got {d:?}"
            )))
        }
    };
    if n == 0 {
        return Err(Error::EmptyInput("temporal pooling"));
    }
    let mut frames = encoder.input.forward(frame_features)?;
    if encoder.positional {
        let d = frames.dim(1)?;
        frames = frames.broadcast_add(&sinusoidal_positions(n, d, frames.dtype(), frames.device())?)?;
    }
    let mut q = queries.values.tensor();
    for b in &encoder.blocks {
        q = b.forward(&q, &frames)?;
    }
    encoder.final_norm.forward(&q)
}

#[derive(Debug, Clone)]
pub struct FaceEncoder {
    pub config: FaceEncoderConfig,
    pub frame: FrameEncoder,
    pub temporal: TemporalEncoder,
    pub queries: LearnableQueries,
}

impl FaceEncoder {
    pub fn new(config: FaceEncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        Ok(FaceEncoder {
            frame: FrameEncoder::new(config.d_frame, init)?,
            temporal: TemporalEncoder::new(&config, init)?,
            queries: LearnableQueries::new(config.n_queries, config.d_visual, init)?,
            config,
        })
    }

    pub fn encode(&self, crops: &FaceCropSequence) -> Result<Tensor> {
        temporal_pool(&self.frame.encode_frames(crops)?, &self.queries, &self.temporal)
    }

    /// Same as [`FaceEncoder::encode`] from precomputed [`pooled_crops`].
    pub fn encode_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        temporal_pool(&self.frame.forward_pooled(pooled)?, &self.queries, &self.temporal)
    }
}

impl super::FeatureBackbone for FrameEncoder {
    fn output_dim(&self) -> usize {
        self.out.d_out()
    }

    fn encode(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_pooled(input)
    }
}

impl Parameterized for FaceEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.frame.visit_params(&join(prefix, "frame"), f);
        self.temporal.visit_params(&join(prefix, "temporal"), f);
        self.queries.visit_params(&join(prefix, "queries"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.frame.visit_params_mut(&join(prefix, "frame"), f);
        self.temporal.visit_params_mut(&join(prefix, "temporal"), f);
        self.queries.visit_params_mut(&join(prefix, "queries"), f);
    }
}
