//! The optimization loop shared by all stages.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::MixedSequence;
use crate::manifest::{DatasetManifest, TaskTag};
use crate::model::{AvModel, StageRecord};
use crate::nn::Parameterized;
use crate::prompts::{FaceTask, Modality, SpeechTask};
use crate::training::examples::{
    build_stage1_example, build_stage2_example, build_stage3_example, build_warmup_example, warmup_texts,
};
use crate::training::features::FeatureStore;
use crate::training::loss::{masked_nll_sum, LossReduction};
use crate::training::schedule::OptimizerConfig;
use crate::types::UtteranceRecord;
use crate::util::hash_json;

/// Stage 0 is a text-only warm-up of the decoder; stages 1 to 3 follow the curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    pub objectives: BTreeSet<TaskTag>,
    /// User-turn inputs for stage 3.
    pub modality: Modality,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Frozen-group checksums are verified every this many steps.
    pub eval_every: usize,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    /// Stop once a step's mean per-token loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::for_stage(3)
    }
}

impl StageConfig {
    /// Defaults for `stage` with all of its objectives enabled.
    pub fn for_stage(stage: u8) -> Self {
        let objectives: BTreeSet<TaskTag> = match stage {
            0 => [TaskTag::Dialogue].into(),
            1 => [TaskTag::Asr, TaskTag::Ser].into(),
            2 => [TaskTag::Emr, TaskTag::Emd].into(),
            _ => [TaskTag::Dialogue].into(),
        };
        StageConfig {
            stage,
            objectives,
            modality: Modality::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            max_steps: 200,
            eval_every: 20,
            loss_reduction: LossReduction::MeanPerToken,
            seed: 0,
            target_loss: None,
        }
    }

    /// Parameter groups updated in this stage; everything else is frozen.
    pub fn trainable_groups(&self) -> &'static [&'static str] {
        match self.stage {
            0 => &["decoder.base", "decoder.bias_norm"],
            1 => &["speech_encoder", "projector.audio"],
            2 => &[
                "face_encoder.frame",
                "face_encoder.temporal",
                "face_encoder.queries",
                "projector.visual",
            ],
            _ => &["decoder.lora", "decoder.bias_norm"],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 3 {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        let allowed: &[TaskTag] = match self.stage {
            0 => &[
                TaskTag::Asr,
                TaskTag::Ser,
                TaskTag::Emr,
                TaskTag::Emd,
                TaskTag::Dialogue,
            ],
            1 => &[TaskTag::Asr, TaskTag::Ser],
            2 => &[TaskTag::Emr, TaskTag::Emd],
            _ => &[TaskTag::Dialogue],
        };
        if self.objectives.is_empty() {
            return Err(Error::Config(format!("stage {} has no objectives", self.stage)));
        }
        if let Some(bad) = self.objectives.iter().find(|o| !allowed.contains(o)) {
            return Err(Error::Config(format!(
                "objective `{bad}` does not belong to stage {}",
                self.stage
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.stage == 3 && !self.modality.text && !self.modality.audio && !self.modality.video {
            return Err(Error::Config("stage 3 needs at least one input modality".into()));
        }
        self.optimizer.validate()
    }

    pub fn speech_task(&self, tags: &BTreeSet<TaskTag>) -> SpeechTask {
        if self.objectives.contains(&TaskTag::Ser) && tags.contains(&TaskTag::Ser) {
            SpeechTask::AsrSer
        } else {
            SpeechTask::Asr
        }
    }

    pub fn face_task(&self, tags: &BTreeSet<TaskTag>) -> FaceTask {
        if self.objectives.contains(&TaskTag::Emd) && tags.contains(&TaskTag::Emd) {
            FaceTask::EmrEmd
        } else {
            FaceTask::Emr
        }
    }
}

/// Inputs of a training run.
pub struct TrainingData<'a> {
    pub manifest: &'a DatasetManifest,
    pub features: &'a FeatureStore,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub examples: usize,
    /// Mean per-token loss of each step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub frozen_checksums: BTreeMap<String, String>,
}

enum Item<'a> {
    Fixed(MixedSequence),
    Speech(&'a UtteranceRecord, SpeechTask),
    Face(&'a UtteranceRecord, FaceTask),
}

fn collect_items<'a>(model: &AvModel, cfg: &StageConfig, data: &TrainingData<'a>) -> Result<Vec<Item<'a>>> {
    let ctx = model.example_context();
    let mut items = Vec::new();
    match cfg.stage {
        0 => {
            for t in warmup_texts(data.manifest, model.vocab(), model.config.ser_target)? {
                items.push(Item::Fixed(build_warmup_example(&t, &ctx)?));
            }
            // The stage-1 and stage-2 layouts too, read through the still-untrained encoders, so
            // the decoder meets those targets at the positions they occupy later.
            for r in &data.manifest.records {
                let tags = r.tasks();
                for u in r.user_utterances() {
                    if u.transcript.is_empty() || u.emotion.is_empty() {
                        continue;
                    }
                    if u.audio_ref.is_some() && (tags.contains(&TaskTag::Asr) || tags.contains(&TaskTag::Ser)) {
                        let task = if tags.contains(&TaskTag::Ser) {
                            SpeechTask::AsrSer
                        } else {
                            SpeechTask::Asr
                        };
                        items.push(Item::Speech(u, task));
                    }
                    if u.video_ref.is_some() && tags.contains(&TaskTag::Emr) {
                        let task = match &u.facial_description {
                            Some(d) if tags.contains(&TaskTag::Emd) && !d.is_empty() => FaceTask::EmrEmd,
                            _ => FaceTask::Emr,
                        };
                        items.push(Item::Face(u, task));
                    }
                }
            }
        }
        1 | 2 => {
            for r in &data.manifest.records {
                if !cfg.objectives.iter().any(|o| r.tasks().contains(o)) {
                    continue;
                }
                for u in r.user_utterances() {
                    items.push(if cfg.stage == 1 {
                        Item::Speech(u, cfg.speech_task(r.tasks()))
                    } else {
                        Item::Face(u, cfg.face_task(r.tasks()))
                    });
                }
            }
        }
        _ => {
            let mut feats = |u: &UtteranceRecord| data.features.turn_features(model, u, cfg.modality);
            for d in data.manifest.dialogues() {
                let ex = build_stage3_example(d, cfg.modality, &mut feats, &ctx)?;
                if ex.dropped > 0 {
                    tracing::warn!(dialogue = %d.dialogue_id, dropped = ex.dropped, "oldest rounds dropped to fit the context");
                }
                items.push(Item::Fixed(ex.sequence));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Precondition(format!(
            "no training examples for stage {}",
            cfg.stage
        )));
    }
    Ok(items)
}

fn item_sequence(model: &AvModel, item: &Item<'_>, features: &FeatureStore) -> Result<MixedSequence> {
    let ctx = model.example_context();
    match item {
        Item::Fixed(s) => Ok(s.clone()),
        Item::Speech(u, task) => {
            let audio = model.speech.encode(features.mel(u)?)?;
            build_stage1_example(u, *task, &audio, &ctx)
        }
        Item::Face(u, task) => {
            let visual = model.face.encode_pooled(features.pooled_faces(u)?)?;
            build_stage2_example(u, *task, &visual, &ctx)
        }
    }
}

fn check_preconditions(model: &AvModel, cfg: &StageConfig, manifest: &DatasetManifest) -> Result<()> {
    for o in &cfg.objectives {
        if !manifest.has_task(*o) {
            return Err(Error::Precondition(format!(
                "stage {} objective `{o}` but the manifest has no records tagged `{o}`",
                cfg.stage
            )));
        }
    }
    if cfg.stage == 0 && model.lm.decoder.has_adapters() {
        return Err(Error::Precondition(
            "text warm-up runs before adapters are attached".into(),
        ));
    }
    Ok(())
}

fn global_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

fn clip(grads: &mut GradStore, vars: &[Var], scale: f64) -> Result<()> {
    for v in vars {
        if let Some(g) = grads.remove(v) {
            grads.insert(v, (g * scale)?);
        }
    }
    Ok(())
}

fn frozen_checksums(model: &AvModel, trainable: &[&str]) -> Result<BTreeMap<String, String>> {
    Ok(model
        .checksums()?
        .into_iter()
        .filter(|(g, _)| !trainable.contains(&g.as_str()))
        .collect())
}

fn verify_frozen(model: &AvModel, trainable: &[&str], expected: &BTreeMap<String, String>) -> Result<()> {
    let now = frozen_checksums(model, trainable)?;
    for (g, sum) in expected {
        if now.get(g) != Some(sum) {
            return Err(Error::FrozenGroupViolation(g.clone()));
        }
    }
    Ok(())
}

/// Runs one stage on `model` in place and records it in the model's stage history.
pub fn train_stage(
    model: &mut AvModel,
    cfg: &StageConfig,
    data: &TrainingData<'_>,
    log: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    check_preconditions(model, cfg, data.manifest)?;
    if cfg.stage == 3 && !model.lm.decoder.has_adapters() {
        model.attach_lora()?;
    }
    let trainable = cfg.trainable_groups();
    model.set_trainable_groups(trainable);
    let result = run(model, cfg, data, log, trainable);
    model.set_trainable_groups(&[]);
    let report = result?;
    model.stages.push(StageRecord {
        stage: cfg.stage,
        objectives: cfg.objectives.iter().map(|o| o.to_string()).collect(),
        steps: report.steps,
        final_loss: report.final_loss,
        config_hash: hash_json(cfg)?,
    });
    Ok(report)
}

fn run(
    model: &AvModel,
    cfg: &StageConfig,
    data: &TrainingData<'_>,
    log: Option<&Path>,
    trainable: &[&str],
) -> Result<StageReport> {
    let frozen = frozen_checksums(model, trainable)?;
    let items = collect_items(model, cfg, data)?;
    let vars = model.trainable_vars();
    let oc = &cfg.optimizer;
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: oc.lr_at(0, cfg.max_steps),
            beta1: oc.beta1,
            beta2: oc.beta2,
            eps: oc.eps,
            weight_decay: oc.weight_decay,
        },
    )?;
    let mut log_file = match log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.batch_size.min(items.len());
    let started = Instant::now();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut stopped_early = false;

    for step in 0..cfg.max_steps {
        let lr = oc.lr_at(step, cfg.max_steps);
        opt.set_learning_rate(lr);
        let mut total: Option<Tensor> = None;
        let mut tokens = 0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = item_sequence(model, &items[order[cursor]], data.features)?;
            cursor += 1;
            let logp = model.lm.score(&seq)?;
            let (nll, n) = masked_nll_sum(&logp, &seq.position_tokens(), &seq.target_mask())?;
            tokens += n;
            total = Some(match total {
                Some(t) => (t + nll)?,
                None => nll,
            });
        }
        let sum = total.expect("batch is non-empty");
        let loss = match cfg.loss_reduction {
            LossReduction::MeanPerToken => (sum.clone() / tokens as f64)?,
            LossReduction::SumPerRound => (sum.clone() / batch as f64)?,
        };
        let per_token = sum.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? / tokens as f64;
        if !per_token.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grads = loss.backward()?;
        let grad_norm = global_norm(&grads, &vars)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        if oc.max_grad_norm > 0.0 && grad_norm > oc.max_grad_norm {
            clip(&mut grads, &vars, oc.max_grad_norm / grad_norm)?;
        }
        opt.step(&grads)?;
        losses.push(per_token);
        if let Some(f) = log_file.as_mut() {
            let line = StepLog {
                stage: cfg.stage,
                step,
                loss: per_token,
                lr,
                grad_norm,
                tokens,
                elapsed_ms: started.elapsed().as_millis() as u64,
            };
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
        }
        tracing::debug!(stage = cfg.stage, step, loss = per_token, lr, grad_norm, "step");
        if (step + 1) % cfg.eval_every == 0 {
            verify_frozen(model, trainable, &frozen)?;
        }
        if cfg.target_loss.is_some_and(|t| per_token < t) {
            stopped_early = true;
            break;
        }
    }
    verify_frozen(model, trainable, &frozen)?;
    Ok(StageReport {
        stage: cfg.stage,
        steps: losses.len(),
        examples: items.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        stopped_early,
        frozen_checksums: frozen,
    })
}
