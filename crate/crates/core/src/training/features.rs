//! Model-ready inputs for every media-bearing utterance of a manifest.

use std::collections::HashMap;

use candle_core::{Device, Tensor};

use crate::encoders::{mel_tensor, pooled_crops};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::model::AvModel;
use crate::preprocess::{CacheStats, Preprocessor, UtteranceFeatures};
use crate::prompts::Modality;
use crate::training::examples::TurnFeatures;
use crate::types::UtteranceRecord;

/// Scaled mel matrices and pooled face crops keyed by [`UtteranceRecord::media_key`].
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    mels: HashMap<String, Tensor>,
    faces: HashMap<String, Tensor>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Preprocesses every user utterance of `manifest` that carries media.
    pub fn build(manifest: &DatasetManifest, pre: &Preprocessor) -> Result<Self> {
        let mut store = FeatureStore::new();
        let mut stats = CacheStats::default();
        for r in &manifest.records {
            for u in r.user_utterances() {
                if u.audio_ref.is_none() && u.video_ref.is_none() {
                    continue;
                }
                if store.mels.contains_key(&u.media_key()) || store.faces.contains_key(&u.media_key()) {
                    continue;
                }
                let f = pre.preprocess_utterance(u, &manifest.base_dir, &mut stats)?;
                store.insert(u, &f)?;
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, rec: &UtteranceRecord, f: &UtteranceFeatures) -> Result<()> {
        let key = rec.media_key();
        if let Some(m) = &f.mel {
            self.mels.insert(key.clone(), mel_tensor(m, &Device::Cpu)?);
        }
        if let Some(c) = &f.faces {
            self.faces.insert(key, pooled_crops(c, &Device::Cpu)?);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mels.len().max(self.faces.len())
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty() && self.faces.is_empty()
    }

    pub fn mel(&self, rec: &UtteranceRecord) -> Result<&Tensor> {
        if rec.audio_ref.is_none() {
            return Err(Error::MissingField("audio_ref"));
        }
        self.mels
            .get(&rec.media_key())
            .ok_or_else(|| Error::Precondition(format!("no audio features for `{}`", rec.media_key())))
    }

    pub fn pooled_faces(&self, rec: &UtteranceRecord) -> Result<&Tensor> {
        if rec.video_ref.is_none() {
            return Err(Error::MissingField("video_ref"));
        }
        self.faces
            .get(&rec.media_key())
            .ok_or_else(|| Error::Precondition(format!("no face features for `{}`", rec.media_key())))
    }

    /// Encoder outputs for the inputs `modality` asks for, detached from the graph.
    pub fn turn_features(&self, model: &AvModel, rec: &UtteranceRecord, modality: Modality) -> Result<TurnFeatures> {
        let mut out = TurnFeatures::default();
        if modality.audio {
            out.audio = Some(model.speech.encode(self.mel(rec)?)?.detach());
        }
        if modality.video {
            out.video = Some(model.face.encode_pooled(self.pooled_faces(rec)?)?.detach());
        }
        Ok(out)
    }
}
