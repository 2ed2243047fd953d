//! Raw media to model-ready features, with a content-addressed on-disk cache.

pub mod cache;
pub mod mel;
pub mod synth;
pub mod video;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{FeatureCache, FeatureKind};
pub use mel::{compute_log_mel, FeatureMatrix, MelConfig};
pub use video::{
    crop_face, crops_from_frames, sample_frames, CenterSquareDetector, FaceCropSequence, FaceDetector,
    PngDirectoryDecoder, VideoDecoder,
};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::types::UtteranceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mel: MelConfig,
    pub frame_stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            mel: MelConfig::default(),
            frame_stride: 10,
        }
    }
}

impl PreprocessConfig {
    fn mel_hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(&self.mel).expect("config serializes")).into()
    }

    fn face_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"faces/v1/");
        h.update(self.frame_stride.to_le_bytes());
        h.update((video::CROP_SIZE as u64).to_le_bytes());
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Features of one utterance.
#[derive(Debug, Clone, Default)]
pub struct UtteranceFeatures {
    pub mel: Option<FeatureMatrix>,
    pub faces: Option<FaceCropSequence>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub written: usize,
    pub reused: usize,
    pub detector_fallbacks: usize,
}

pub struct Preprocessor {
    pub config: PreprocessConfig,
    cache: Option<FeatureCache>,
    decoder: Box<dyn VideoDecoder>,
    detector: Box<dyn FaceDetector>,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig, cache: Option<FeatureCache>) -> Result<Self> {
        config.mel.validate()?;
        if config.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be at least 1".into()));
        }
        Ok(Preprocessor {
            config,
            cache,
            decoder: Box::new(PngDirectoryDecoder),
            detector: Box::new(CenterSquareDetector),
        })
    }

    pub fn with_decoder(mut self, decoder: Box<dyn VideoDecoder>) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn with_detector(mut self, detector: Box<dyn FaceDetector>) -> Self {
        self.detector = detector;
        self
    }

    /// Log-mel features of a decoded waveform, resampling first if needed.
    pub fn mel_from_samples(&self, samples: &[f32], rate: u32) -> Result<FeatureMatrix> {
        let target = self.config.mel.sample_rate_hz;
        if rate == target {
            compute_log_mel(samples, rate, &self.config.mel)
        } else {
            let resampled = mel::resample_linear(samples, rate, target);
            compute_log_mel(&resampled, target, &self.config.mel)
        }
    }

    pub fn mel_from_wav_bytes(&self, bytes: &[u8], name: &str) -> Result<FeatureMatrix> {
        let (samples, rate) = mel::decode_wav_bytes(bytes, name)?;
        self.mel_from_samples(&samples, rate)
    }

    pub fn faces_from_decoded(&self, video: &video::DecodedVideo) -> Result<(FaceCropSequence, usize)> {
        crops_from_frames(
            &video.frames,
            video.fps,
            self.config.frame_stride,
            self.detector.as_ref(),
        )
    }

    /// Features for one record, read from or written to the cache when one is configured.
    pub fn preprocess_utterance(
        &self,
        rec: &UtteranceRecord,
        base_dir: &Path,
        stats: &mut CacheStats,
    ) -> Result<UtteranceFeatures> {
        let mut out = UtteranceFeatures::default();
        if let Some(rel) = &rec.audio_ref {
            let path = base_dir.join(rel);
            let bytes = read_media(&path)?;
            let cfg_hash = self.config.mel_hash();
            let key = FeatureCache::key(FeatureKind::Mel, &cfg_hash, &bytes);
            let cached = match &self.cache {
                Some(c) => c.get_mel(&key)?,
                None => None,
            };
            out.mel = Some(match cached {
                Some(m) => {
                    stats.reused += 1;
                    m
                }
                None => {
                    let m = self.mel_from_wav_bytes(&bytes, &path.display().to_string())?;
                    if let Some(c) = &self.cache {
                        c.put_mel(&key, cfg_hash, &m)?;
                        stats.written += 1;
                    }
                    m
                }
            });
        }
        if let Some(rel) = &rec.video_ref {
            let path = base_dir.join(rel);
            let content = video_content(&path)?;
            let cfg_hash = self.config.face_hash();
            let key = FeatureCache::key(FeatureKind::Faces, &cfg_hash, &content);
            let cached = match &self.cache {
                Some(c) => c.get_faces(&key)?,
                None => None,
            };
            out.faces = Some(match cached {
                Some(f) => {
                    stats.reused += 1;
                    f
                }
                None => {
                    let decoded = self.decoder.decode(&path)?;
                    let (faces, fallbacks) = self.faces_from_decoded(&decoded)?;
                    stats.detector_fallbacks += fallbacks;
                    if let Some(c) = &self.cache {
                        c.put_faces(&key, cfg_hash, &faces)?;
                        stats.written += 1;
                    }
                    faces
                }
            });
        }
        Ok(out)
    }

    /// Preprocesses every media-bearing utterance of a manifest using `workers` threads.
    pub fn preprocess_manifest(&self, manifest: &DatasetManifest, workers: usize) -> Result<CacheStats> {
        let mut records: Vec<&UtteranceRecord> = Vec::new();
        for r in &manifest.records {
            for u in r.user_utterances() {
                if u.audio_ref.is_some() || u.video_ref.is_some() {
                    records.push(u);
                }
            }
        }
        let next = AtomicUsize::new(0);
        let workers = workers.max(1);
        let results: Vec<Result<CacheStats>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut stats = CacheStats::default();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some(rec) = records.get(i) else { break };
                            self.preprocess_utterance(rec, &manifest.base_dir, &mut stats)?;
                        }
                        Ok(stats)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Precondition("worker panicked".into())))
                })
                .collect()
        });
        let mut total = CacheStats::default();
        for r in results {
            let s = r?;
            total.written += s.written;
            total.reused += s.reused;
            total.detector_fallbacks += s.detector_fallbacks;
        }
        Ok(total)
    }
}

fn read_media(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingMedia(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Bytes identifying a video: the file itself, or every file of a frame directory in name order.
fn video_content(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingMedia(path.to_path_buf()));
    }
    if !path.is_dir() {
        return read_media(path);
    }
    let mut names: Vec<_> = std::fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        if p.is_file() {
            h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            h.update(std::fs::read(&p)?);
        }
    }
    Ok(h.finalize().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Speaker, SpeakerMetadata};
    use image::{Rgb, RgbImage};

    fn record(audio: Option<&str>, video: Option<&str>) -> UtteranceRecord {
        UtteranceRecord {
            speaker: Speaker::User,
            transcript: "hi".into(),
            emotion: "happy".into(),
            audio_ref: audio.map(String::from),
            video_ref: video.map(String::from),
            metadata: SpeakerMetadata::default(),
            facial_description: None,
        }
    }

    fn write_tone(path: &Path, freq: f32, tweak: Option<usize>) {
        let mut s: Vec<f32> = (0..8000)
            .map(|i| 0.3 * (2.0 * std::f32::consts::PI * freq * i as f32 / 16_000.0).sin())
            .collect();
        if let Some(i) = tweak {
            s[i] += 0.01;
        }
        std::fs::write(path, mel::encode_wav_bytes(&s, 16_000).unwrap()).unwrap();
    }

    fn write_frames(dir: &Path, n: usize) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let img = RgbImage::from_pixel(32, 32, Rgb([(i * 8) as u8, 40, 90]));
            img.save(dir.join(format!("frame_{i:03}.png"))).unwrap();
        }
    }

    #[test]
    fn audio_only_and_audio_video_records() {
        let dir = tempfile::tempdir().unwrap();
        write_tone(&dir.path().join("a.wav"), 220.0, None);
        write_frames(&dir.path().join("v"), 25);
        let cache = FeatureCache::new(dir.path().join("cache")).unwrap();
        let pre = Preprocessor::new(PreprocessConfig::default(), Some(cache.clone())).unwrap();

        let mut stats = CacheStats::default();
        let f = pre
            .preprocess_utterance(&record(Some("a.wav"), None), dir.path(), &mut stats)
            .unwrap();
        assert_eq!(f.mel.as_ref().unwrap().rows, 50);
        assert!(f.faces.is_none());
        assert_eq!(stats.written, 1);

        let mut stats = CacheStats::default();
        let f = pre
            .preprocess_utterance(&record(Some("a.wav"), Some("v")), dir.path(), &mut stats)
            .unwrap();
        assert_eq!(f.faces.as_ref().unwrap().source_frame_indices, vec![0, 10, 20]);
        assert_eq!((stats.reused, stats.written), (1, 1));

        // Unchanged inputs: nothing new is written.
        let before = std::fs::read_dir(cache.dir()).unwrap().count();
        let mut stats = CacheStats::default();
        pre.preprocess_utterance(&record(Some("a.wav"), Some("v")), dir.path(), &mut stats)
            .unwrap();
        assert_eq!((stats.reused, stats.written), (2, 0));
        assert_eq!(std::fs::read_dir(cache.dir()).unwrap().count(), before);
    }

    #[test]
    fn one_changed_sample_changes_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path().join("cache")).unwrap();
        let pre = Preprocessor::new(PreprocessConfig::default(), Some(cache.clone())).unwrap();
        write_tone(&dir.path().join("a.wav"), 220.0, None);
        let mut stats = CacheStats::default();
        pre.preprocess_utterance(&record(Some("a.wav"), None), dir.path(), &mut stats)
            .unwrap();
        write_tone(&dir.path().join("a.wav"), 220.0, Some(1234));
        pre.preprocess_utterance(&record(Some("a.wav"), None), dir.path(), &mut stats)
            .unwrap();
        assert_eq!(stats.written, 2);
        assert_eq!(std::fs::read_dir(cache.dir()).unwrap().count(), 2);
    }

    #[test]
    fn corrupt_and_missing_media() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.wav"), b"definitely not a wav").unwrap();
        let pre = Preprocessor::new(PreprocessConfig::default(), None).unwrap();
        let mut stats = CacheStats::default();
        match pre.preprocess_utterance(&record(Some("bad.wav"), None), dir.path(), &mut stats) {
            Err(Error::Decode { path, .. }) => assert!(path.contains("bad.wav")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            pre.preprocess_utterance(&record(Some("nope.wav"), None), dir.path(), &mut stats),
            Err(Error::MissingMedia(_))
        ));
    }
}
