//! Emotion-aware audio-visual dialogue modeling.

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod lm;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod prompts;
pub mod service;
pub mod training;
pub mod types;
pub mod util;

pub use error::{Error, Result};
