//! Corpus evaluation: sampled assistant turns, generation with ground-truth history, and the
//! metric report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::emotion::{emotion_similarity, EmotionEmbedder};
use super::metrics::{
    corpus_bleu, distinct_1, meteor, perplexity, rouge_l, tokenize, Matcher, TokenScorer, METRIC_TOKENIZER,
};
use crate::error::{Error, Result};
use crate::lm::{Decoding, LanguageModel, MixedSequence, PromptPart, Special};
use crate::manifest::{DatasetManifest, Split};
use crate::model::AvModel;
use crate::prompts::{parse_ai_output, AiSlot, Modality, ParseMode};
use crate::training::{assemble_dialogue, masked_nll_sum, DialogueRound, FeatureStore};
use crate::util::hash_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub turns_per_dialogue: usize,
    pub seed: u64,
    pub decoding: Decoding,
    pub max_new_tokens: usize,
    pub modality: Modality,
    pub matcher: Matcher,
    /// Accept manifests whose split is not `test` (for overfit checks on training data).
    pub allow_non_test: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            turns_per_dialogue: 4,
            seed: 0,
            decoding: Decoding::Greedy,
            max_new_tokens: 160,
            modality: Modality::default(),
            matcher: Matcher::Exact,
            allow_non_test: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub turns_per_dialogue: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub dialogue_id: String,
    /// 0-based round index.
    pub round: usize,
    pub reference_emotion: String,
    pub reference: String,
    pub emotion: String,
    pub hypothesis: String,
    pub raw: String,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub distinct1: f64,
    pub emobert: f64,
    pub ppl: f64,
    pub n_samples: usize,
    pub protocol: Protocol,
    /// Fraction of sampled turns whose generated emotion tag equals the reference.
    pub emotion_accuracy: f64,
    pub parse_warnings: usize,
    /// Turns whose text had no emotion cue on either side.
    pub emobert_zero_vectors: usize,
    pub metric_tokenizer: String,
    pub ppl_scorer: String,
    pub checkpoint_hash: String,
    pub manifest_hash: String,
    pub config_hash: String,
    pub samples: Vec<SampleResult>,
}

impl MetricReport {
    /// One-row table in the usual column order.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| BLEU-1 | BLEU-4 | ROUGE-L | METEOR | PPL | EmoBERT | Dist-1 |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {:.4} | {:.4} | {:.4} | {:.4} | {:.3} | {:.4} | {:.4} |",
            self.bleu1, self.bleu4, self.rouge_l, self.meteor, self.ppl, self.emobert, self.distinct1
        );
        s
    }
}

/// Scores text under the model's own decoder, unconditioned, including the closing `eos`.
pub struct LmScorer<'a> {
    pub lm: &'a LanguageModel,
}

impl TokenScorer for LmScorer<'_> {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        let mut seq = MixedSequence::new();
        let mut tokens = self.lm.tokenizer.encode_text(text);
        tokens.push(Special::Eos.id());
        seq.push_text(tokens.clone(), true);
        let logp = self.lm.score(&seq)?;
        let idx = Tensor::new(tokens.as_slice(), logp.device())?.unsqueeze(1)?;
        let rows = logp.narrow(0, 0, tokens.len())?;
        let lp = rows
            .gather(&idx, 1)?
            .squeeze(1)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        Ok(lp)
    }
}

/// Sorted, distinct round indices: all rounds when there are at most `k`, otherwise `k`
/// drawn without replacement.
pub fn sample_rounds(rounds: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rounds <= k {
        return (0..rounds).collect();
    }
    let mut picked = rand::seq::index::sample(rng, rounds, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Generates the AI turn of every sampled round with the true history before it.
pub fn generate_samples(
    model: &AvModel,
    manifest: &DatasetManifest,
    features: &FeatureStore,
    cfg: &EvalConfig,
) -> Result<Vec<SampleResult>> {
    let ctx = model.example_context();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for d in manifest.dialogues() {
        let rounds = d.split_rounds();
        let picked = sample_rounds(rounds.len(), cfg.turns_per_dialogue, &mut rng);
        let mut cached = Vec::with_capacity(rounds.len());
        for r in &rounds {
            cached.push(features.turn_features(model, r.user, cfg.modality)?);
        }
        for &ri in &picked {
            let mut material = Vec::with_capacity(ri + 1);
            for (j, r) in rounds[..=ri].iter().enumerate() {
                material.push(DialogueRound {
                    transcript: &r.user.transcript,
                    features: cached[j].clone(),
                    ai: if j == ri {
                        AiSlot::Open
                    } else {
                        AiSlot::Context {
                            emotion: &r.ai.emotion,
                            text: &r.ai.transcript,
                        }
                    },
                });
            }
            let assembled = assemble_dialogue(&material, cfg.modality, 1 + cfg.max_new_tokens, &ctx)?;
            let gen = model
                .lm
                .generate(&assembled.sequence, &cfg.decoding, cfg.max_new_tokens)?;
            let raw = model.lm.tokenizer.decode(&gen.tokens);
            let parsed = parse_ai_output(&raw, ParseMode::Lenient, model.vocab())?;
            let ai = rounds[ri].ai;
            out.push(SampleResult {
                dialogue_id: d.dialogue_id.clone(),
                round: ri,
                reference_emotion: ai.emotion.clone(),
                reference: ai.transcript.clone(),
                emotion: parsed.emotion,
                hypothesis: parsed.text,
                raw,
                warning: parsed.warning,
            });
        }
    }
    Ok(out)
}

/// Metric report over already generated samples.
pub fn score_samples(
    samples: Vec<SampleResult>,
    scorer: &dyn TokenScorer,
    embedder: &dyn EmotionEmbedder,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = samples.len() as f64;
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = samples
        .iter()
        .map(|s| (tokenize(&s.hypothesis), vec![tokenize(&s.reference)]))
        .collect();
    let rouge = pairs.iter().map(|(c, r)| rouge_l(c, &r[0])).sum::<f64>() / n;
    let met = pairs.iter().map(|(c, r)| meteor(c, &r[0], cfg.matcher)).sum::<f64>() / n;
    let hyps: Vec<Vec<String>> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let distinct = match distinct_1(&hyps) {
        Ok(v) => v,
        Err(Error::EmptyCorpus) => 0.0,
        Err(e) => return Err(e),
    };
    let sims: Vec<_> = samples
        .iter()
        .map(|s| emotion_similarity(embedder, &s.hypothesis, &s.reference))
        .collect();
    let texts: Vec<String> = samples.iter().map(|s| s.hypothesis.clone()).collect();
    Ok(MetricReport {
        bleu1: corpus_bleu(&pairs, 1),
        bleu4: corpus_bleu(&pairs, 4),
        rouge_l: rouge,
        meteor: met,
        distinct1: distinct,
        emobert: sims.iter().map(|s| s.score).sum::<f64>() / n,
        ppl: perplexity(scorer, &texts)?,
        n_samples: samples.len(),
        protocol: Protocol {
            turns_per_dialogue: cfg.turns_per_dialogue,
            seed: cfg.seed,
        },
        emotion_accuracy: samples.iter().filter(|s| s.emotion == s.reference_emotion).count() as f64 / n,
        parse_warnings: samples.iter().filter(|s| s.warning.is_some()).count(),
        emobert_zero_vectors: sims.iter().filter(|s| s.zero_vector).count(),
        metric_tokenizer: METRIC_TOKENIZER.to_string(),
        ppl_scorer: "builtin decoder of the evaluated checkpoint; values are scorer-relative".to_string(),
        checkpoint_hash: String::new(),
        manifest_hash: String::new(),
        config_hash: hash_json(cfg)?,
        samples,
    })
}

/// Full protocol on a `test` manifest (or any split with `allow_non_test`).
pub fn evaluate_corpus(
    model: &AvModel,
    manifest: &DatasetManifest,
    features: &FeatureStore,
    cfg: &EvalConfig,
    embedder: &dyn EmotionEmbedder,
) -> Result<MetricReport> {
    if manifest.split != Split::Test && !cfg.allow_non_test {
        return Err(Error::Precondition(format!(
            "evaluation expects a test manifest, got {:?}",
            manifest.split
        )));
    }
    let samples = generate_samples(model, manifest, features, cfg)?;
    let scorer = LmScorer { lm: &model.lm };
    let mut report = score_samples(samples, &scorer, embedder, cfg)?;
    report.checkpoint_hash = hash_json(&model.checksums()?)?;
    report.manifest_hash = crate::util::sha256_hex(manifest.to_jsonl()?.as_bytes());
    Ok(report)
}

/// Label whose tokens score highest after `parts`; returns its index in `labels`.
pub fn forced_choice(
    model: &AvModel,
    parts: &[PromptPart],
    audio: &[Tensor],
    visual: &[Tensor],
    labels: &[String],
) -> Result<usize> {
    let ctx = model.example_context();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, l) in labels.iter().enumerate() {
        let mut p = parts.to_vec();
        p.push(PromptPart::Target(l.clone()));
        let seq = crate::lm::assemble_input(&p, audio, visual, ctx.tokenizer, ctx.context_len)?;
        let (nll, _) = masked_nll_sum(&model.lm.score(&seq)?, &seq.position_tokens(), &seq.target_mask())?;
        let lp = -nll.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lp > best.0 {
            best = (lp, i);
        }
    }
    Ok(best.1)
}

/// Per-label counts of a recognition probe.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProbeResult {
    pub correct: usize,
    pub total: usize,
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ProbeResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn record(&mut self, truth: &str, predicted: &str) {
        self.total += 1;
        if truth == predicted {
            self.correct += 1;
        }
        *self
            .confusion
            .entry(truth.to_string())
            .or_default()
            .entry(predicted.to_string())
            .or_insert(0) += 1;
    }
}

/// User-emotion recognition from speech: the speech prompt, the true transcript and the
/// emotion cue, then a forced choice over the vocabulary.
pub fn speech_emotion_probe(
    model: &AvModel,
    manifest: &DatasetManifest,
    features: &FeatureStore,
) -> Result<ProbeResult> {
    let labels = model.vocab().labels().to_vec();
    let mut res = ProbeResult::default();
    for u in manifest.utterances_for(crate::manifest::TaskTag::Ser) {
        let audio = model.speech.encode(features.mel(u)?)?;
        let mut parts = model
            .prompts
            .build_stage1_prompt(crate::prompts::SpeechTask::AsrSer, None)
            .parts;
        parts.push(PromptPart::Text(format!(
            "{}{}emotion: ",
            u.transcript,
            crate::training::examples::SER_SEPARATOR
        )));
        let i = forced_choice(model, &parts, &[audio], &[], &labels)?;
        res.record(&u.emotion, &labels[i]);
    }
    Ok(res)
}

/// User-emotion recognition from the face with the prompt of `task`.
pub fn face_emotion_probe(
    model: &AvModel,
    manifest: &DatasetManifest,
    features: &FeatureStore,
    task: crate::prompts::FaceTask,
) -> Result<ProbeResult> {
    let labels = model.vocab().labels().to_vec();
    let mut res = ProbeResult::default();
    for u in manifest.utterances_for(crate::manifest::TaskTag::Emr) {
        let visual = model.face.encode_pooled(features.pooled_faces(u)?)?;
        let parts = model.prompts.build_stage2_prompt(task, None).parts;
        let i = forced_choice(model, &parts, &[], &[visual], &labels)?;
        res.record(&u.emotion, &labels[i]);
    }
    Ok(res)
}
