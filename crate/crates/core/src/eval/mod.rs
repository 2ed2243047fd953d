//! Dialogue-generation metrics and the corpus evaluation protocol.

pub mod corpus;
pub mod emotion;
pub mod metrics;

pub use corpus::{
    evaluate_corpus, face_emotion_probe, forced_choice, generate_samples, score_samples, speech_emotion_probe,
    EvalConfig, LmScorer, MetricReport, ProbeResult, SampleResult,
};
pub use emotion::{emotion_similarity, EmotionEmbedder, LexiconEmbedder, Similarity};
pub use metrics::{
    bleu_n, corpus_bleu, distinct_1, lcs_len, meteor, meteor_alignment, perplexity, rouge_l, tokenize, Matcher,
    TokenScorer, METRIC_TOKENIZER,
};
