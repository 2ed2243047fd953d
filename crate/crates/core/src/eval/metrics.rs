//! Text-overlap, diversity and perplexity metrics over metric tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Version tag of [`tokenize`]; changing its rules must change this string.
pub const METRIC_TOKENIZER: &str = "lower-punct-ws/1";

/// Lowercases, splits on whitespace and splits every punctuation character into its own
/// token. Apostrophes between letters stay inside the word.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_apostrophe = c == '\''
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if c.is_alphanumeric() || inner_apostrophe {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn clipped_matches(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, preferring the shorter on ties.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Geometric mean of clipped precisions over orders `1..=n`, times the brevity penalty.
///
/// Orders longer than the candidate have no n-grams and are left out of the mean, so a
/// candidate identical to its reference always scores 1. Any order with zero matches gives 0.
pub fn bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1 to 4");
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in 1..=n.min(candidate.len()) {
        let (m, total) = clipped_matches(candidate, references, k);
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / total as f64).ln();
        orders += 1;
    }
    brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references)) * (log_sum / orders as f64).exp()
}

/// Corpus BLEU: clipped counts and lengths pooled over all pairs before taking precisions.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1 to 4");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
        for k in 1..=n {
            let (m, t) = clipped_matches(cand, refs, k);
            matched[k - 1] += m;
            total[k - 1] += t;
        }
    }
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in 0..n {
        if total[k] == 0 {
            continue;
        }
        if matched[k] == 0 {
            return 0.0;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        orders += 1;
    }
    brevity_penalty(c, r) * (log_sum / orders as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Exact,
    /// Tokens match when their suffix-stripped stems are equal.
    ExactStem,
}

/// Strips one common English inflectional suffix.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "edly", "ed", "ly", "es", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

pub const METEOR_ALPHA: f64 = 0.9;
const METEOR_SEARCH_BUDGET: usize = 2_000_000;

/// Matches and the fewest chunks over all maximum-size one-to-one alignments.
pub fn meteor_alignment(candidate: &[String], reference: &[String], matcher: Matcher) -> (usize, usize) {
    let key = |w: &String| -> String {
        match matcher {
            Matcher::Exact => w.clone(),
            Matcher::ExactStem => stem(w).to_string(),
        }
    };
    let ck: Vec<String> = candidate.iter().map(key).collect();
    let rk: Vec<String> = reference.iter().map(key).collect();
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in rk.iter().enumerate() {
        ref_pos.entry(w).or_default().push(j);
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in &ck {
        *cand_count.entry(w).or_insert(0) += 1;
    }
    // Per type, how many candidate occurrences may stay unmatched in a maximum alignment.
    let mut slack: HashMap<&str, usize> = HashMap::new();
    let mut matches = 0;
    for (w, c) in &cand_count {
        let r = ref_pos.get(w).map_or(0, |v| v.len());
        matches += (*c).min(r);
        slack.insert(w, c - (*c).min(r));
    }
    if matches == 0 {
        return (0, 0);
    }
    let mut search = ChunkSearch {
        ck: &ck,
        ref_pos: &ref_pos,
        used: vec![false; rk.len()],
        slack,
        best: matches,
        nodes: 0,
    };
    search.dfs(0, None, 0);
    (matches, search.best)
}

struct ChunkSearch<'a> {
    ck: &'a [String],
    ref_pos: &'a HashMap<&'a str, Vec<usize>>,
    used: Vec<bool>,
    slack: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
}

impl<'a> ChunkSearch<'a> {
    /// `prev` is the reference position matched by candidate position `i - 1`, if any.
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_SEARCH_BUDGET {
            return;
        }
        if i == self.ck.len() {
            self.best = chunks;
            return;
        }
        let w: &'a str = &self.ck[i];
        let positions: &'a [usize] = self.ref_pos.get(w).map_or(&[], |v| v.as_slice());
        // Continuing the current chunk first finds good bounds early.
        let mut cands: Vec<usize> = positions.iter().copied().filter(|&j| !self.used[j]).collect();
        if let Some(p) = prev {
            if let Some(k) = cands.iter().position(|&j| j == p + 1) {
                cands.swap(0, k);
            }
        }
        for j in cands {
            let extends = prev.is_some_and(|p| p + 1 == j);
            self.used[j] = true;
            self.dfs(i + 1, Some(j), chunks + usize::from(!extends));
            self.used[j] = false;
        }
        let s = self.slack.get(w).copied().unwrap_or(0);
        if s > 0 {
            self.slack.insert(w, s - 1);
            self.dfs(i + 1, None, chunks);
            self.slack.insert(w, s);
        }
    }
}

/// METEOR: harmonic mean weighted towards recall, times the fragmentation penalty.
pub fn meteor(candidate: &[String], reference: &[String], matcher: Matcher) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference, matcher);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Unique unigrams over total unigrams, pooled over the corpus.
pub fn distinct_1(corpus: &[Vec<String>]) -> Result<f64> {
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let unique: std::collections::HashSet<&String> = corpus.iter().flatten().collect();
    Ok(unique.len() as f64 / total as f64)
}

/// A language model that assigns a log-probability to each token of a text.
pub trait TokenScorer {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>>;
}

/// `exp(total NLL / total tokens)` pooled over all responses.
pub fn perplexity(scorer: &dyn TokenScorer, responses: &[String]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for r in responses {
        let lps = scorer.token_logprobs(r).map_err(|e| match e {
            Error::ScorerFailure(_) => e,
            other => Error::ScorerFailure(other.to_string()),
        })?;
        for lp in lps {
            if !lp.is_finite() && lp != f64::NEG_INFINITY {
                return Err(Error::ScorerFailure(format!("invalid log-probability {lp}")));
            }
            nll -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(t("Wow, I didn't!"), ["wow", ",", "i", "didn't", "!"]);
        assert_eq!(t("  "), Vec::<String>::new());
    }

    #[test]
    fn bleu_hand_values() {
        assert_eq!(bleu_n(&t("the the the the"), &[t("the cat")], 1), 0.25);
        assert_eq!(bleu_n(&t("a b c d e"), &[t("a b c d e")], 4), 1.0);
        assert_eq!(bleu_n(&t("hi"), &[t("hi")], 4), 1.0);
        assert_eq!(bleu_n(&[], &[t("the cat")], 1), 0.0);
        let short = bleu_n(&t("the"), &[t("the cat")], 1);
        assert!((short - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_values() {
        assert!((rouge_l(&t("the cat"), &t("the cat sat")) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &t("a b")), 1.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
    }

    #[test]
    fn meteor_hand_values() {
        assert_eq!(meteor(&t("the cat"), &t("cat the"), Matcher::Exact), 0.5);
        let s = t("one two three four five six seven eight");
        assert!((meteor(&s, &s, Matcher::Exact) - 0.999023).abs() < 1e-6);
        assert_eq!(meteor(&t("a"), &t("b"), Matcher::Exact), 0.0);
        assert_eq!(meteor(&t("cats jumped"), &t("cat jumping"), Matcher::Exact), 0.0);
        assert!(meteor(&t("cats jumped"), &t("cat jumping"), Matcher::ExactStem) > 0.4);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // Greedy left-to-right matching would pair the first "a" and split the run.
        let (m, chunks) = meteor_alignment(&t("a b"), &t("a x a b"), Matcher::Exact);
        assert_eq!((m, chunks), (2, 1));
    }

    #[test]
    fn distinct_values() {
        assert_eq!(distinct_1(&[t("a b a c")]).unwrap(), 0.75);
        assert!(matches!(distinct_1(&[vec![]]), Err(Error::EmptyCorpus)));
    }

    struct Fixed(Vec<Vec<f64>>);

    impl TokenScorer for Fixed {
        fn token_logprobs(&self, text: &str) -> Result<Vec<f64>> {
            Ok(self.0[text.parse::<usize>().unwrap()].clone())
        }
    }

    #[test]
    fn perplexity_pools_tokens() {
        let s = Fixed(vec![vec![0.5f64.ln()], vec![0.125f64.ln()]]);
        let ppl = perplexity(&s, &["0".into(), "1".into()]).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
        let uniform = Fixed(vec![vec![(1.0f64 / 256.0).ln(); 10]]);
        let ppl = perplexity(&uniform, &["0".into()]).unwrap();
        assert!((ppl / 256.0 - 1.0).abs() < 1e-6);
        assert!(matches!(perplexity(&uniform, &[]), Err(Error::EmptyCorpus)));
    }
}
