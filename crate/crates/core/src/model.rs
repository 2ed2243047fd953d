//! The full model: encoders, projections and decoder, with named parameter groups and
//! checkpoint directories.
//!
//! A checkpoint directory holds `checkpoint.json` plus one safetensors file per group family:
//! `speech_encoder`, `face_encoder`, `projector`, `decoder` (base weights) and, when adapters are
//! attached, `adapters` (adapter factors together with the tuned biases and norms).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{FaceEncoder, FaceEncoderConfig, SpeechEncoder, SpeechEncoderConfig};
use crate::error::{Error, Result};
use crate::lm::tokenizer::TokenizerSpec;
use crate::lm::{DecoderConfig, LanguageModel, LoraConfig};
use crate::nn::{checksum, join, Init, Param, ParamKind, Parameterized};
use crate::preprocess::{FaceCropSequence, FeatureMatrix};
use crate::prompts::{PromptSet, SerTarget};
use crate::training::ExampleContext;
use crate::types::EmotionVocabulary;
use crate::util::{hash_json, write_atomic};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter groups used for freezing and checksums.
pub const GROUPS: [&str; 9] = [
    "speech_encoder",
    "face_encoder.frame",
    "face_encoder.temporal",
    "face_encoder.queries",
    "projector.audio",
    "projector.visual",
    "decoder.base",
    "decoder.bias_norm",
    "decoder.lora",
];

/// Group of a fully qualified parameter name.
pub fn group_of(name: &str, kind: ParamKind) -> &'static str {
    if let Some(rest) = name.strip_prefix("decoder.") {
        let _ = rest;
        return if kind.is_lora() {
            "decoder.lora"
        } else if kind.is_bias_or_norm() {
            "decoder.bias_norm"
        } else {
            "decoder.base"
        };
    }
    for g in GROUPS {
        if name == g || name.starts_with(&format!("{g}.")) {
            return g;
        }
    }
    "other"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub speech: SpeechEncoderConfig,
    pub face: FaceEncoderConfig,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub emotions: EmotionVocabulary,
    /// Place the visual span before the audio span in each user turn.
    pub visual_first: bool,
    /// Metadata carried by stage-1 SER targets.
    #[serde(default)]
    pub ser_target: SerTarget,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Full-size defaults: 128 queries, 6 temporal layers of 8 heads, 4096 context.
    fn default() -> Self {
        ModelConfig {
            speech: SpeechEncoderConfig::default(),
            face: FaceEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            emotions: EmotionVocabulary::default(),
            visual_first: false,
            ser_target: SerTarget::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset used by the tests and the synthetic corpus.
    pub fn tiny() -> Self {
        ModelConfig {
            speech: SpeechEncoderConfig {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_audio: 64,
                ..SpeechEncoderConfig::default()
            },
            face: FaceEncoderConfig {
                d_frame: 64,
                n_queries: 16,
                d_visual: 64,
                temporal_layers: 2,
                temporal_heads: 4,
                ..FaceEncoderConfig::default()
            },
            decoder: DecoderConfig {
                d_model: 128,
                n_layers: 3,
                n_heads: 4,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.speech.validate()?;
        self.face.validate()?;
        self.decoder.validate()?;
        self.lora.validate()
    }
}

/// One completed training stage, kept in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub objectives: Vec<String>,
    pub steps: usize,
    pub final_loss: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub file: String,
    pub sha256: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub model_config_hash: String,
    pub tokenizer: TokenizerSpec,
    pub prompt_set_version: u32,
    pub prompt_set_hash: String,
    pub stages: Vec<StageRecord>,
    pub has_adapters: bool,
    pub groups: BTreeMap<String, GroupEntry>,
}

#[derive(Debug, Clone)]
pub struct AvModel {
    pub config: ModelConfig,
    pub speech: SpeechEncoder,
    pub face: FaceEncoder,
    pub lm: LanguageModel,
    pub prompts: PromptSet,
    pub stages: Vec<StageRecord>,
}

impl AvModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed, DType::F32, Device::Cpu);
        let speech = SpeechEncoder::new(config.speech.clone(), &mut init)?;
        let face = FaceEncoder::new(config.face.clone(), &mut init)?;
        let lm = LanguageModel::new(
            config.decoder.clone(),
            config.speech.d_audio,
            config.face.d_visual,
            &mut init,
        )?;
        Ok(AvModel {
            config,
            speech,
            face,
            lm,
            prompts: PromptSet::builtin(),
            stages: Vec::new(),
        })
    }

    pub fn vocab(&self) -> &EmotionVocabulary {
        &self.config.emotions
    }

    pub fn example_context(&self) -> ExampleContext<'_> {
        ExampleContext {
            prompts: &self.prompts,
            vocab: &self.config.emotions,
            tokenizer: &self.lm.tokenizer,
            context_len: self.lm.context_len(),
            visual_first: self.config.visual_first,
            ser_target: self.config.ser_target,
        }
    }

    pub fn device(&self) -> &Device {
        self.lm.decoder.device()
    }

    pub fn encode_audio(&self, mel: &FeatureMatrix) -> Result<Tensor> {
        self.speech.encode_matrix(mel)
    }

    pub fn encode_video(&self, faces: &FaceCropSequence) -> Result<Tensor> {
        self.face.encode(faces)
    }

    /// Attaches stage-3 adapters with a seed derived from the model seed.
    pub fn attach_lora(&mut self) -> Result<()> {
        let mut init = Init::new(self.config.seed ^ 0x10fa, DType::F32, Device::Cpu);
        let cfg = self.config.lora.clone();
        self.lm.decoder.attach_lora(&cfg, &mut init)
    }

    pub fn group_params(&self, group: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| {
            if group_of(&n, p.kind()) == group {
                out.push((n, p.clone()));
            }
        });
        out
    }

    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        GROUPS
            .iter()
            .map(|g| Ok((g.to_string(), checksum(&self.group_params(g))?)))
            .collect()
    }

    /// Makes exactly the parameters of `groups` trainable.
    pub fn set_trainable_groups(&mut self, groups: &[&str]) {
        self.visit_params_mut("", &mut |n, p| {
            let g = group_of(&n, p.kind());
            p.set_trainable(groups.contains(&g));
        });
    }

    pub fn trainable_groups(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        self.visit_params("", &mut |n, p| {
            let g = group_of(&n, p.kind());
            if p.is_trainable() && !out.contains(&g) {
                out.push(g);
            }
        });
        out
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointMeta> {
        std::fs::create_dir_all(dir)?;
        let mut files: BTreeMap<&str, HashMap<String, Tensor>> = BTreeMap::new();
        let mut groups: BTreeMap<String, GroupEntry> = BTreeMap::new();
        let base_bias_norm: HashMap<String, Tensor> = self
            .lm
            .decoder
            .base_bias_norm()
            .into_iter()
            .map(|(n, t)| (join("decoder", &n), t))
            .collect();
        let has_adapters = self.lm.decoder.has_adapters();
        let mut all = Vec::new();
        self.visit_params("", &mut |n, p| all.push((n, p.clone())));
        for (name, p) in &all {
            let group = group_of(name, p.kind());
            let file = file_of(group);
            let value = p.var().as_tensor().to_dtype(DType::F32)?;
            if group == "decoder.bias_norm" {
                let base = base_bias_norm.get(name).cloned().unwrap_or_else(|| value.clone());
                files
                    .entry("decoder")
                    .or_default()
                    .insert(name.clone(), base.to_dtype(DType::F32)?);
                if has_adapters {
                    files.entry("adapters").or_default().insert(name.clone(), value);
                }
            } else {
                files.entry(file).or_default().insert(name.clone(), value);
            }
        }
        for g in GROUPS {
            let params = self.group_params(g);
            if params.is_empty() {
                continue;
            }
            groups.insert(
                g.to_string(),
                GroupEntry {
                    file: format!("{}.safetensors", file_of(g)),
                    sha256: checksum(&params)?,
                    shapes: params
                        .iter()
                        .map(|(n, p)| (n.clone(), p.var().dims().to_vec()))
                        .collect(),
                },
            );
        }
        for (file, tensors) in &files {
            let tmp = dir.join(format!(".{file}.safetensors.tmp"));
            candle_core::safetensors::save(tensors, &tmp)?;
            std::fs::rename(&tmp, dir.join(format!("{file}.safetensors")))?;
        }
        if !has_adapters {
            let stale = dir.join("adapters.safetensors");
            if stale.exists() {
                std::fs::remove_file(stale)?;
            }
        }
        write_atomic(&dir.join("prompts.txt"), self.prompts.source().as_bytes())?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            model: self.config.clone(),
            model_config_hash: hash_json(&self.config)?,
            tokenizer: self.lm.tokenizer.spec(),
            prompt_set_version: self.prompts.version,
            prompt_set_hash: self.prompts.hash().to_string(),
            stages: self.stages.clone(),
            has_adapters,
            groups,
        };
        write_atomic(&dir.join("checkpoint.json"), &serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join("checkpoint.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = AvModel::read_meta(dir)?;
        let mut model = AvModel::new(meta.model.clone())?;
        if meta.tokenizer != model.lm.tokenizer.spec() {
            return Err(Error::Checkpoint("checkpoint tokenizer does not match".into()));
        }
        let prompts = PromptSet::load(&dir.join("prompts.txt"))?;
        if prompts.hash() != meta.prompt_set_hash {
            return Err(Error::Checkpoint("prompt set does not match its recorded hash".into()));
        }
        model.prompts = prompts;
        model.stages = meta.stages.clone();
        if meta.has_adapters {
            model.attach_lora()?;
        }
        let mut order = vec!["speech_encoder", "face_encoder", "projector", "decoder"];
        if meta.has_adapters {
            order.push("adapters");
        }
        let mut values: HashMap<String, Tensor> = HashMap::new();
        for file in order {
            let path = dir.join(format!("{file}.safetensors"));
            let loaded = candle_core::safetensors::load(&path, &Device::Cpu)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            values.extend(loaded);
        }
        // Base biases and norms first, so the adapter snapshot holds base values.
        let mut missing = Vec::new();
        let mut result = Ok(());
        model.visit_params("", &mut |n, p| match values.get(&n) {
            Some(t) => {
                if let Err(e) = p.set(t) {
                    result = Err(e);
                }
            }
            None => missing.push(n),
        });
        result?;
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        if meta.has_adapters {
            // The adapters file overrode biases and norms above; rebuild the base snapshot.
            let decoder_file = candle_core::safetensors::load(dir.join("decoder.safetensors"), &Device::Cpu)?;
            let tuned: Vec<(String, Tensor)> = model
                .group_params("decoder.bias_norm")
                .into_iter()
                .map(|(n, p)| (n, p.var().as_tensor().copy().expect("cpu copy")))
                .collect();
            let adapters: Vec<(String, Tensor)> = model
                .group_params("decoder.lora")
                .into_iter()
                .map(|(n, p)| (n, p.var().as_tensor().copy().expect("cpu copy")))
                .collect();
            model.lm.decoder.detach_lora()?;
            for (n, p) in model.group_params("decoder.bias_norm") {
                if let Some(t) = decoder_file.get(&n) {
                    p.set(t)?;
                }
            }
            model.attach_lora()?;
            let tuned: HashMap<String, Tensor> = tuned.into_iter().chain(adapters).collect();
            let mut result = Ok(());
            model.visit_params("", &mut |n, p| {
                if let Some(t) = tuned.get(&n) {
                    if let Err(e) = p.set(t) {
                        result = Err(e);
                    }
                }
            });
            result?;
        }
        for (g, entry) in &meta.groups {
            let actual = checksum(&model.group_params(g))?;
            if actual != entry.sha256 {
                return Err(Error::Checkpoint(format!("group `{g}` does not match its checksum")));
            }
        }
        Ok(model)
    }
}

fn file_of(group: &str) -> &'static str {
    match group {
        "speech_encoder" => "speech_encoder",
        g if g.starts_with("face_encoder") => "face_encoder",
        g if g.starts_with("projector") => "projector",
        "decoder.lora" => "adapters",
        _ => "decoder",
    }
}

impl Parameterized for AvModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.speech.visit_params(&join(prefix, "speech_encoder"), f);
        self.face.visit_params(&join(prefix, "face_encoder"), f);
        self.lm.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.speech.visit_params_mut(&join(prefix, "speech_encoder"), f);
        self.face.visit_params_mut(&join(prefix, "face_encoder"), f);
        self.lm.visit_params_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.decoder.d_model = 32;
        c.decoder.n_layers = 1;
        c.speech.d_model = 16;
        c.speech.n_layers = 1;
        c.speech.d_audio = 16;
        c.face.d_frame = 16;
        c.face.d_visual = 16;
        c.face.n_queries = 4;
        c.face.temporal_layers = 1;
        c.lora.rank = 2;
        c
    }

    #[test]
    fn every_parameter_has_a_group() {
        let m = AvModel::new(micro()).unwrap();
        m.visit_params("", &mut |n, p| assert_ne!(group_of(&n, p.kind()), "other", "{n}"));
        assert!(m.group_params("decoder.lora").is_empty());
        assert!(!m.group_params("face_encoder.queries").is_empty());
    }

    #[test]
    fn checkpoint_round_trip_with_adapters() {
        let mut m = AvModel::new(micro()).unwrap();
        let base = m.checksums().unwrap();
        m.attach_lora().unwrap();
        for (_, p) in m
            .group_params("decoder.bias_norm")
            .iter()
            .chain(&m.group_params("decoder.lora"))
        {
            p.set(&(p.var().as_tensor() + 0.25).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let meta = m.save(dir.path()).unwrap();
        assert!(meta.has_adapters);
        let loaded = AvModel::load(dir.path()).unwrap();
        assert_eq!(loaded.checksums().unwrap(), m.checksums().unwrap());

        let mut detached = loaded.clone();
        detached.lm.decoder.detach_lora().unwrap();
        assert_eq!(detached.checksums().unwrap(), base);
    }
}
