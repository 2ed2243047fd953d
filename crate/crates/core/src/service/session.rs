//! Turn-based dialogue sessions over a loaded checkpoint. This is the synchronous core used by
//! both the HTTP layer and the C interface.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{mel_tensor, pooled_crops};
use crate::error::{Error, Result};
use crate::lm::{Decoding, Special};
use crate::model::AvModel;
use crate::preprocess::video::decode_frame_archive;
use crate::preprocess::{PreprocessConfig, Preprocessor};
use crate::prompts::{parse_ai_output, AiSlot, Modality, ParseMode};
use crate::training::{assemble_dialogue, DialogueRound, TurnFeatures};
use crate::util::{hash_json, unix_millis, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Positions kept free for the reply.
    pub generation_reserve: usize,
    /// Reply length cap; at most `generation_reserve - 1`.
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    /// Idle sessions older than this are evicted.
    pub session_ttl_secs: u64,
    /// Concurrent model calls across all sessions.
    pub max_concurrent: usize,
    pub generation_timeout_ms: u64,
    /// Sessions are written here after every turn when set.
    pub snapshot_dir: Option<PathBuf>,
    /// Require `Authorization: Bearer <token>` on HTTP requests when set.
    pub bearer_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            generation_reserve: 256,
            max_new_tokens: 200,
            decoding: Decoding::Greedy,
            session_ttl_secs: 3600,
            max_concurrent: 2,
            generation_timeout_ms: 60_000,
            snapshot_dir: None,
            bearer_token: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 || self.max_new_tokens >= self.generation_reserve {
            return Err(Error::Config(
                "max_new_tokens must be positive and below generation_reserve".into(),
            ));
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be positive".into()));
        }
        Ok(())
    }
}

/// Per-session overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    /// Sampling is opt-in; greedy otherwise.
    pub decoding: Option<Decoding>,
}

/// Media and optional text of one user turn.
#[derive(Debug, Clone, Default)]
pub struct TurnInput {
    /// 16-bit PCM WAV bytes.
    pub audio_wav: Vec<u8>,
    /// Tar archive of PNG frames.
    pub video_archive: Option<Vec<u8>>,
    /// Shown to the model as text when present.
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub emotion: String,
    pub text: String,
    /// 1-based.
    pub round_index: usize,
    pub warnings: Vec<String>,
    /// Positions the model saw: prompt, history and the generated reply.
    pub context_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRound {
    index: usize,
    transcript: Option<String>,
    audio: Option<(usize, Vec<f32>)>,
    video: Option<(usize, Vec<f32>)>,
    emotion: String,
    text: String,
    timestamp_ms: u64,
    truncated: bool,
}

fn to_rows(t: &Tensor) -> Result<(usize, Vec<f32>)> {
    Ok((t.dim(0)?, t.flatten_all()?.to_vec1::<f32>()?))
}

fn from_rows((rows, data): &(usize, Vec<f32>)) -> Result<Tensor> {
    let cols = data.len() / (*rows).max(1);
    Ok(Tensor::from_slice(data, (*rows, cols), &Device::Cpu)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Session {
    id: String,
    created_at_ms: u64,
    last_active_ms: u64,
    options: SessionOptions,
    rounds: Vec<StoredRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRound {
    pub index: usize,
    pub transcript: Option<String>,
    pub emotion: String,
    pub text: String,
    pub timestamp_ms: u64,
    /// Dropped from the model's view to respect the context budget.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub created_at_ms: u64,
    pub rounds: Vec<TranscriptRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: Option<String>,
    pub prompt_set_hash: Option<String>,
}

/// How many of the newest rounds fit: history plus the current round (the last entry) plus
/// `overhead` and `reserve` must stay within `limit`. The current round is never dropped and
/// rounds are never split.
pub fn truncate_history(round_tokens: &[usize], overhead: usize, reserve: usize, limit: usize) -> Result<usize> {
    let Some(&current) = round_tokens.last() else {
        return Ok(0);
    };
    let budget = limit.saturating_sub(reserve + overhead);
    if current > budget {
        return Err(Error::TurnTooLarge {
            tokens: current,
            budget,
        });
    }
    let mut used = 0;
    let mut kept = 0;
    for &t in round_tokens.iter().rev() {
        if used + t > budget {
            break;
        }
        used += t;
        kept += 1;
    }
    Ok(kept)
}

struct Engine {
    model: AvModel,
    preprocessor: Preprocessor,
    checkpoint_hash: String,
}

/// Counting semaphore bounding concurrent model calls.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct DialogueService {
    config: ServiceConfig,
    engine: RwLock<Option<Arc<Engine>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    permits: Permits,
}

impl DialogueService {
    pub fn new(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        Ok(DialogueService {
            permits: Permits {
                free: Mutex::new(config.max_concurrent),
                cv: Condvar::new(),
            },
            config,
            engine: RwLock::new(None),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Serves `model`; features are computed with `pre`.
    pub fn install_model(&self, model: AvModel, pre: PreprocessConfig) -> Result<()> {
        let checkpoint_hash = hash_json(&model.checksums()?)?;
        let preprocessor = Preprocessor::new(pre, None)?;
        *self.engine.write().expect("engine lock") = Some(Arc::new(Engine {
            model,
            preprocessor,
            checkpoint_hash,
        }));
        Ok(())
    }

    pub fn load_checkpoint(&self, dir: &Path) -> Result<()> {
        self.install_model(AvModel::load(dir)?, PreprocessConfig::default())
    }

    pub fn is_ready(&self) -> bool {
        self.engine.read().expect("engine lock").is_some()
    }

    fn engine(&self) -> Result<Arc<Engine>> {
        self.engine
            .read()
            .expect("engine lock")
            .clone()
            .ok_or(Error::ServerNotReady)
    }

    pub fn health(&self) -> Health {
        match self.engine.read().expect("engine lock").as_ref() {
            Some(e) => Health {
                status: "ok".into(),
                checkpoint_hash: Some(e.checkpoint_hash.clone()),
                prompt_set_hash: Some(e.model.prompts.hash().to_string()),
            },
            None => Health {
                status: "not_ready".into(),
                checkpoint_hash: None,
                prompt_set_hash: None,
            },
        }
    }

    pub fn create_session(&self, options: SessionOptions) -> Result<String> {
        self.engine()?;
        let id = format!("{:032x}", rand::random::<u128>());
        let now = unix_millis();
        let s = Session {
            id: id.clone(),
            created_at_ms: now,
            last_active_ms: now,
            options,
            rounds: Vec::new(),
        };
        self.sessions
            .lock()
            .expect("session table")
            .insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn delete_session(&self, id: &str) -> Result<()> {
        self.sessions
            .lock()
            .expect("session table")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many went.
    pub fn evict_idle(&self, now_ms: u64) -> usize {
        let ttl = self.config.session_ttl_secs.saturating_mul(1000);
        let mut table = self.sessions.lock().expect("session table");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now_ms.saturating_sub(s.last_active_ms) <= ttl,
            Err(_) => true,
        });
        before - table.len()
    }

    pub fn transcript(&self, id: &str) -> Result<Transcript> {
        let s = self.session(id)?;
        let s = s.lock().expect("session lock");
        Ok(Transcript {
            session_id: s.id.clone(),
            created_at_ms: s.created_at_ms,
            rounds: s
                .rounds
                .iter()
                .map(|r| TranscriptRound {
                    index: r.index,
                    transcript: r.transcript.clone(),
                    emotion: r.emotion.clone(),
                    text: r.text.clone(),
                    timestamp_ms: r.timestamp_ms,
                    truncated: r.truncated,
                })
                .collect(),
        })
    }

    /// Serialized session state; equal bytes mean equal history.
    pub fn session_state(&self, id: &str) -> Result<Vec<u8>> {
        let s = self.session(id)?;
        let s = s.lock().expect("session lock");
        Ok(serde_json::to_vec(&*s)?)
    }

    /// Runs one round. On any error the session is left exactly as it was.
    pub fn post_turn(&self, id: &str, input: &TurnInput) -> Result<TurnResponse> {
        let handle = self.session(id)?;
        let mut session = handle.lock().expect("session lock");
        let engine = self.engine()?;
        let (response, next) = {
            let _permit = self.permits.acquire();
            self.run_turn(&engine, &session, input)?
        };
        *session = next;
        if let Some(dir) = &self.config.snapshot_dir {
            write_atomic(
                &dir.join(format!("{}.json", session.id)),
                &serde_json::to_vec(&*session)?,
            )?;
        }
        Ok(response)
    }

    /// Restores a session written to the snapshot directory.
    pub fn restore_session(&self, id: &str) -> Result<()> {
        let dir = self
            .config
            .snapshot_dir
            .as_ref()
            .ok_or_else(|| Error::Config("no snapshot directory configured".into()))?;
        let bytes = std::fs::read(dir.join(format!("{id}.json"))).map_err(|_| Error::UnknownSession(id.into()))?;
        let s: Session = serde_json::from_slice(&bytes)?;
        self.sessions
            .lock()
            .expect("session table")
            .insert(id.to_string(), Arc::new(Mutex::new(s)));
        Ok(())
    }

    fn run_turn(&self, engine: &Engine, session: &Session, input: &TurnInput) -> Result<(TurnResponse, Session)> {
        let model = &engine.model;
        let mut warnings = Vec::new();
        let mel = engine.preprocessor.mel_from_wav_bytes(&input.audio_wav, "audio")?;
        let audio = model.speech.encode(&mel_tensor(&mel, &Device::Cpu)?)?.detach();
        let video = match &input.video_archive {
            Some(bytes) => {
                let decoded = decode_frame_archive(bytes, "video")?;
                let (faces, fallbacks) = engine.preprocessor.faces_from_decoded(&decoded)?;
                if fallbacks > 0 {
                    warnings.push(format!("no face found in {fallbacks} frames; used the frame centre"));
                }
                Some(model.face.encode_pooled(&pooled_crops(&faces, &Device::Cpu)?)?.detach())
            }
            None => {
                warnings.push("no video supplied; served from audio only".into());
                None
            }
        };
        let transcript = input.transcript.as_deref().filter(|t| !t.is_empty());

        let active: Vec<&StoredRound> = session.rounds.iter().filter(|r| !r.truncated).collect();
        let mut history = Vec::with_capacity(active.len());
        for r in &active {
            history.push(TurnFeatures {
                audio: r.audio.as_ref().map(from_rows).transpose()?,
                video: r.video.as_ref().map(from_rows).transpose()?,
            });
        }
        // Inputs the current turn offers decide what every round shows.
        let modality = Modality {
            text: transcript.is_some(),
            audio: true,
            video: video.is_some(),
        };
        let current_features = TurnFeatures {
            audio: Some(audio.clone()),
            video: video.clone(),
        };
        let mut material = Vec::with_capacity(active.len() + 1);
        for (r, f) in active.iter().zip(&history) {
            if (modality.video && f.video.is_none()) || (modality.text && r.transcript.is_none()) {
                // Rounds that lack an input the current turn uses cannot be shown consistently.
                material.clear();
                continue;
            }
            material.push(DialogueRound {
                transcript: r.transcript.as_deref().unwrap_or(""),
                features: f.clone(),
                ai: AiSlot::Context {
                    emotion: &r.emotion,
                    text: &r.text,
                },
            });
        }
        material.push(DialogueRound {
            transcript: transcript.unwrap_or(""),
            features: current_features,
            ai: AiSlot::Open,
        });

        let ctx = model.example_context();
        let sizes: Vec<usize> = material
            .iter()
            .map(|r| round_tokens(model, r, modality))
            .collect::<Result<_>>()?;
        let overhead = model.lm.tokenizer.encode(model.prompts.get("dialogue.system")).len();
        let kept = truncate_history(&sizes, overhead, self.config.generation_reserve, ctx.context_len)?;
        let material = &material[material.len() - kept..];
        let assembled = assemble_dialogue(material, modality, self.config.generation_reserve, &ctx)?;
        // History rounds still shown to the model: always the newest ones.
        let visible = material.len() - 1 - assembled.dropped;
        let hidden = active.len() - visible;
        if hidden > 0 {
            warnings.push(format!("{hidden} earlier rounds are outside the context"));
        }

        let decoding = session
            .options
            .decoding
            .clone()
            .unwrap_or_else(|| self.config.decoding.clone());
        let deadline = Instant::now() + Duration::from_millis(self.config.generation_timeout_ms);
        let gen = model.lm.generate_until(
            &assembled.sequence,
            &decoding,
            self.config.max_new_tokens,
            Some(deadline),
        )?;
        let raw = model.lm.tokenizer.decode(&gen.tokens);
        let parsed = parse_ai_output(&raw, ParseMode::Lenient, model.vocab())?;
        if let Some(w) = parsed.warning {
            warnings.push(format!("reply format: {w}"));
        }
        if !gen.hit_eos {
            warnings.push(format!("reply cut at {} tokens", self.config.max_new_tokens));
        }

        let mut next = session.clone();
        for r in next.rounds.iter_mut().filter(|r| !r.truncated).take(hidden) {
            r.truncated = true;
            r.audio = None;
            r.video = None;
        }
        let index = next.rounds.len() + 1;
        let now = unix_millis();
        next.rounds.push(StoredRound {
            index,
            transcript: transcript.map(str::to_string),
            audio: Some(to_rows(&audio)?),
            video: video.as_ref().map(to_rows).transpose()?,
            emotion: parsed.emotion.clone(),
            text: parsed.text.clone(),
            timestamp_ms: now,
            truncated: false,
        });
        next.last_active_ms = now;
        Ok((
            TurnResponse {
                emotion: parsed.emotion,
                text: parsed.text,
                round_index: index,
                warnings,
                context_tokens: 1 + assembled.sequence.total_len() + gen.tokens.len() + usize::from(gen.hit_eos),
            },
            next,
        ))
    }
}

/// Positions one round occupies in the assembled sequence; an open round counts its cues only.
fn round_tokens(model: &AvModel, r: &DialogueRound<'_>, modality: Modality) -> Result<usize> {
    let tok = &model.lm.tokenizer;
    let mut n =
        tok.encode(model.prompts.get("dialogue.user")).len() + tok.encode(model.prompts.get("dialogue.ai")).len();
    if modality.text {
        n += 1 + tok.encode_text(r.transcript).len();
    }
    if modality.audio {
        n += r.features.audio.as_ref().map_or(Ok(0), |t| t.dim(0))? + 2;
    }
    if modality.video {
        n += r.features.video.as_ref().map_or(Ok(0), |t| t.dim(0))? + 2;
    }
    if let AiSlot::Context { emotion, text } | AiSlot::Target { emotion, text } = r.ai {
        n += tok
            .encode(&format!(
                "{}{}{}{text}{}",
                Special::EmoBegin.marker(),
                emotion,
                Special::EmoEnd.marker(),
                Special::Eos.marker()
            ))
            .len();
    }
    Ok(n)
}
