//! Deterministic synthetic audio-visual dialogue corpus.
//!
//! Every user turn carries its emotion twice: as the fundamental pitch of the waveform and as
//! the colour and drift direction of a square moving over a grey background. The transcript is
//! drawn from a small grammar independent of the emotion; each grammar phrase is voiced as its
//! own tone, so the words are recoverable from the audio alone. The AI reply depends only on
//! the user's emotion and the object phrase of the transcript.

use std::f32::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::encode_wav_bytes;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Record, Split, TaskTag};
use crate::types::{Dialogue, EmotionVocabulary, Intensity, Speaker, SpeakerMetadata, UtteranceRecord};
use crate::util::write_atomic;

pub const SUBJECTS: [&str; 4] = ["I", "We", "My friend", "They"];
pub const VERBS: [&str; 4] = ["visited", "talked about", "heard about", "watched"];
pub const OBJECTS: [&str; 6] = [
    "the concert",
    "the museum",
    "the new movie",
    "the game",
    "the garden",
    "the old city",
];

const SAMPLE_RATE: u32 = 16_000;
const LEAD_SECONDS: f32 = 0.05;
const PHRASE_SECONDS: f32 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_dialogues: usize,
    pub rounds_per_dialogue: usize,
    pub split: Split,
    pub frames_per_video: usize,
    pub frame_size: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_dialogues: 8,
            rounds_per_dialogue: 2,
            split: Split::Train,
            frames_per_video: 30,
            frame_size: 64,
        }
    }
}

/// Fundamental pitch for the emotion at `index`; adjacent labels are 60 Hz apart.
pub fn emotion_pitch_hz(index: usize) -> f32 {
    150.0 + 60.0 * index as f32
}

/// Tone voicing grammar phrase `index` (subjects, then verbs, then objects).
pub fn phrase_tone_hz(index: usize) -> f32 {
    1200.0 + 110.0 * index as f32
}

pub fn emotion_color(index: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 7] = [
        [240, 200, 40],
        [40, 80, 200],
        [250, 130, 20],
        [140, 60, 180],
        [60, 160, 60],
        [220, 30, 30],
        [235, 235, 235],
    ];
    PALETTE.get(index).copied().unwrap_or_else(|| {
        let h = (index as u32).wrapping_mul(2_654_435_761);
        [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
    })
}

fn drift_direction(index: usize, n: usize) -> (f32, f32) {
    let angle = 2.0 * PI * index as f32 / n.max(1) as f32;
    (angle.cos(), angle.sin())
}

fn direction_word(index: usize, n: usize) -> &'static str {
    let (dx, dy) = drift_direction(index, n);
    match (dx.abs() > dy.abs(), dx >= 0.0, dy >= 0.0) {
        (true, true, _) => "to the right",
        (true, false, _) => "to the left",
        (false, _, true) => "downward",
        (false, _, false) => "upward",
    }
}

/// Two-sentence facial-dynamics description derived from the emotion.
pub fn facial_description(emotion: &str, index: usize, n_labels: usize) -> String {
    let (face, dynamics) = match emotion {
        "happy" => ("The cheeks lift and the eyes crinkle", "The smile widens steadily"),
        "sad" => (
            "The brows draw together and the mouth turns down",
            "The gaze lowers slowly",
        ),
        "surprised" => ("The eyebrows shoot up and the mouth falls open", "The eyes stay wide"),
        "fearful" => ("The eyes widen and the lips pull back", "The face tenses more"),
        "disgusted" => ("The nose wrinkles and the upper lip rises", "The head pulls away"),
        "angry" => ("The brows lower and the jaw clenches", "The stare hardens"),
        "neutral" => (
            "The face stays relaxed with a level gaze",
            "The expression barely changes",
        ),
        _ => ("The face shifts subtly", "The expression settles"),
    };
    format!(
        "{face} as the face drifts {}. {dynamics} over the clip.",
        direction_word(index, n_labels)
    )
}

/// Emotion of the AI reply to a user in `user_emotion`.
pub fn reply_emotion<'a>(user_emotion: &str, vocab: &'a EmotionVocabulary) -> &'a str {
    let wanted = match user_emotion {
        "happy" => "happy",
        "sad" | "disgusted" => "sad",
        "surprised" => "surprised",
        _ => "neutral",
    };
    vocab
        .labels()
        .iter()
        .find(|l| *l == wanted)
        .map(String::as_str)
        .unwrap_or(vocab.default_label())
}

pub fn reply_text(user_emotion: &str, object: &str) -> String {
    match user_emotion {
        "happy" => format!("That sounds wonderful! What did you enjoy most about {object}?"),
        "sad" => format!("I am sorry it felt so heavy. Do you want to talk about {object}?"),
        "surprised" => format!("Wow, I did not expect that either! Tell me more about {object}."),
        "fearful" => format!("That must have been scary. You are safe now, and {object} can wait."),
        "disgusted" => format!("Ugh, that sounds unpleasant. What bothered you about {object}?"),
        "angry" => format!("I understand why you are upset. What happened with {object}?"),
        _ => format!("I see. How was {object} overall?"),
    }
}

struct Utterance {
    transcript: String,
    phrases: [usize; 3],
    object: &'static str,
}

fn sample_utterance(rng: &mut ChaCha8Rng) -> Utterance {
    let s = rng.random_range(0..SUBJECTS.len());
    let v = rng.random_range(0..VERBS.len());
    let o = rng.random_range(0..OBJECTS.len());
    Utterance {
        transcript: format!("{} {} {} today.", SUBJECTS[s], VERBS[v], OBJECTS[o]),
        phrases: [s, SUBJECTS.len() + v, SUBJECTS.len() + VERBS.len() + o],
        object: OBJECTS[o],
    }
}

/// Waveform: emotion pitch throughout, one phrase tone per grammar slot.
pub fn synth_waveform(emotion_index: usize, phrases: &[usize], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let lead = (LEAD_SECONDS * SAMPLE_RATE as f32) as usize;
    let seg = (PHRASE_SECONDS * SAMPLE_RATE as f32) as usize;
    let total = lead + seg * phrases.len();
    let f0 = emotion_pitch_hz(emotion_index);
    let gain = rng.random_range(0.8f32..1.0);
    let fade = (0.005 * SAMPLE_RATE as f32) as usize;
    (0..total)
        .map(|i| {
            let t = i as f32 / SAMPLE_RATE as f32;
            let mut s = 0.45 * (2.0 * PI * f0 * t).sin() + 0.15 * (2.0 * PI * 2.0 * f0 * t).sin();
            if i >= lead {
                let k = (i - lead) / seg;
                let pos = (i - lead) % seg;
                let env = (pos.min(seg - 1 - pos) as f32 / fade as f32).min(1.0);
                s += 0.3 * env * (2.0 * PI * phrase_tone_hz(phrases[k]) * t).sin();
            }
            let noise: f32 = rng.random_range(-0.005f32..0.005);
            (gain * s + noise).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Frames of a coloured square drifting in the emotion's direction.
pub fn synth_frames(emotion_index: usize, n_labels: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<RgbImage> {
    let size = cfg.frame_size as f32;
    let side = (size * 0.22).round() as i32;
    let color = Rgb(emotion_color(emotion_index));
    let (dx, dy) = drift_direction(emotion_index, n_labels);
    let speed = 0.5 * size / cfg.frames_per_video.max(1) as f32;
    let cx0 = size / 2.0 + rng.random_range(-3.0f32..3.0);
    let cy0 = size / 2.0 + rng.random_range(-3.0f32..3.0);
    (0..cfg.frames_per_video)
        .map(|f| {
            let cx = cx0 + dx * speed * f as f32;
            let cy = cy0 + dy * speed * f as f32;
            let (x0, y0) = ((cx - side as f32 / 2.0) as i32, (cy - side as f32 / 2.0) as i32);
            RgbImage::from_fn(cfg.frame_size, cfg.frame_size, |x, y| {
                let (x, y) = (x as i32, y as i32);
                if x >= x0 && x < x0 + side && y >= y0 && y < y0 + side {
                    color
                } else {
                    Rgb([128, 128, 128])
                }
            })
        })
        .collect()
}

/// Writes media and `manifest.jsonl` under `out_dir` and returns the manifest.
pub fn generate_synthetic_corpus(
    out_dir: &Path,
    cfg: &SynthConfig,
    vocab: &EmotionVocabulary,
) -> Result<DatasetManifest> {
    if cfg.n_dialogues == 0 || cfg.rounds_per_dialogue == 0 || cfg.frames_per_video == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least one dialogue, round and frame".into(),
        ));
    }
    let media = out_dir.join("media");
    std::fs::create_dir_all(&media)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_labels = vocab.len();
    let intensities = [Intensity::Low, Intensity::Medium, Intensity::High];
    let genders = ["female", "male"];
    let mut manifest = DatasetManifest::new(cfg.split, out_dir);

    for d in 0..cfg.n_dialogues {
        let mut turns = Vec::with_capacity(2 * cfg.rounds_per_dialogue);
        for r in 0..cfg.rounds_per_dialogue {
            let emo_idx = rng.random_range(0..n_labels);
            let emotion = vocab.labels()[emo_idx].clone();
            let utt = sample_utterance(&mut rng);
            let stem = format!("d{d:03}_r{r}");

            let wave = synth_waveform(emo_idx, &utt.phrases, &mut rng);
            let audio_rel = format!("media/{stem}.wav");
            write_atomic(&out_dir.join(&audio_rel), &encode_wav_bytes(&wave, SAMPLE_RATE)?)?;

            let video_rel = format!("media/{stem}_frames");
            let frame_dir = out_dir.join(&video_rel);
            std::fs::create_dir_all(&frame_dir)?;
            for (f, frame) in synth_frames(emo_idx, n_labels, cfg, &mut rng).iter().enumerate() {
                write_atomic(
                    &frame_dir.join(format!("frame_{f:03}.png")),
                    &super::video::encode_png(frame)?,
                )?;
            }

            let metadata = SpeakerMetadata {
                emotion: Some(emotion.clone()),
                emotion_intensity: Some(intensities[rng.random_range(0..intensities.len())]),
                emotion_description: None,
                gender: Some(genders[rng.random_range(0..genders.len())].to_string()),
                age: Some(rng.random_range(20..70)),
                ethnicity: None,
            };
            turns.push(UtteranceRecord {
                speaker: Speaker::User,
                transcript: utt.transcript,
                emotion: emotion.clone(),
                audio_ref: Some(audio_rel),
                video_ref: Some(video_rel),
                metadata,
                facial_description: Some(facial_description(&emotion, emo_idx, n_labels)),
            });
            turns.push(UtteranceRecord::ai(
                reply_emotion(&emotion, vocab),
                reply_text(&emotion, utt.object),
            ));
        }
        manifest.records.push(Record::Dialogue {
            tasks: [
                TaskTag::Asr,
                TaskTag::Ser,
                TaskTag::Emr,
                TaskTag::Emd,
                TaskTag::Dialogue,
            ]
            .into_iter()
            .collect(),
            dialogue: Dialogue::new(format!("syn-{d:03}"), turns)?,
        });
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
