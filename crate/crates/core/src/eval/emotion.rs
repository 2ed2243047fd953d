//! Emotion-embedding similarity between responses.

use super::metrics::tokenize;

/// Maps a text to a unit-norm emotion vector, or the zero vector for emotion-free text.
pub trait EmotionEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Counts cue words per emotion dimension and normalizes to unit length.
#[derive(Debug, Clone)]
pub struct LexiconEmbedder {
    dims: Vec<(String, Vec<String>)>,
}

const LEXICON: [(&str, &[&str]); 7] = [
    (
        "happy",
        &[
            "happy",
            "glad",
            "joy",
            "joyful",
            "wonderful",
            "great",
            "enjoy",
            "enjoyed",
            "love",
            "delighted",
            "fun",
            "excited",
        ],
    ),
    (
        "sad",
        &[
            "sad", "sorry", "heavy", "unhappy", "miss", "lonely", "cry", "down", "hurt", "upset", "grief",
        ],
    ),
    (
        "surprised",
        &[
            "wow",
            "surprised",
            "surprising",
            "unexpected",
            "expect",
            "amazing",
            "really",
            "whoa",
        ],
    ),
    (
        "fearful",
        &[
            "scary",
            "scared",
            "afraid",
            "fear",
            "safe",
            "worried",
            "nervous",
            "anxious",
            "frightened",
        ],
    ),
    (
        "disgusted",
        &["ugh", "gross", "disgusting", "unpleasant", "bothered", "nasty", "awful"],
    ),
    (
        "angry",
        &[
            "angry",
            "mad",
            "furious",
            "annoyed",
            "understand",
            "frustrated",
            "unfair",
            "hate",
        ],
    ),
    ("neutral", &["see", "okay", "ok", "overall", "fine", "alright", "usual"]),
];

impl Default for LexiconEmbedder {
    fn default() -> Self {
        LexiconEmbedder {
            dims: LEXICON
                .iter()
                .map(|(l, words)| (l.to_string(), words.iter().map(|w| w.to_string()).collect()))
                .collect(),
        }
    }
}

impl LexiconEmbedder {
    pub fn labels(&self) -> Vec<&str> {
        self.dims.iter().map(|(l, _)| l.as_str()).collect()
    }
}

impl EmotionEmbedder for LexiconEmbedder {
    fn dim(&self) -> usize {
        self.dims.len()
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut v: Vec<f64> = self
            .dims
            .iter()
            .map(|(_, words)| tokens.iter().filter(|t| words.contains(t)).count() as f64)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Similarity {
    /// Cosine clipped to `[0, 1]`.
    pub score: f64,
    pub cosine: f64,
    /// Either text had no emotion signal; the score is then 0.
    pub zero_vector: bool,
}

pub fn emotion_similarity(embedder: &dyn EmotionEmbedder, hypothesis: &str, reference: &str) -> Similarity {
    let a = embedder.embed(hypothesis);
    let b = embedder.embed(reference);
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Similarity {
            score: 0.0,
            cosine: 0.0,
            zero_vector: true,
        };
    }
    let cosine = (a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    Similarity {
        score: cosine.clamp(0.0, 1.0),
        cosine,
        zero_vector: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_similarity_cases() {
        let e = LexiconEmbedder::default();
        let same = emotion_similarity(&e, "That sounds wonderful!", "That sounds wonderful!");
        assert!((same.score - 1.0).abs() < 1e-12);
        let apart = emotion_similarity(&e, "I am so happy and joyful", "That is terribly sad");
        assert_eq!(apart.score, 0.0);
        assert!(!apart.zero_vector);
        let none = emotion_similarity(&e, "The table is brown", "It has four legs");
        assert!(none.zero_vector);
        assert_eq!(none.score, 0.0);
    }

    #[test]
    fn embeddings_are_unit_or_zero() {
        let e = LexiconEmbedder::default();
        for s in ["glad glad sorry", "nothing here", "wow"] {
            let v = e.embed(s);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
            assert_eq!(v.len(), e.dim());
        }
    }
}
