//! Speech and face encoders.

pub mod face;
pub mod speech;

use candle_core::Tensor;

pub use face::{
    pooled_crops, temporal_pool, FaceEncoder, FaceEncoderConfig, FrameEncoder, LearnableQueries, TemporalEncoder,
};
pub use speech::{mel_tensor, SpeechEncoder, SpeechEncoderConfig};

use crate::error::Result;

/// What a full-scale pretrained backbone must provide to stand in for a builtin encoder stage:
/// a map from its input matrix to a feature matrix with a fixed row width.
pub trait FeatureBackbone: Send + Sync {
    fn output_dim(&self) -> usize;
    fn encode(&self, input: &Tensor) -> Result<Tensor>;
}
