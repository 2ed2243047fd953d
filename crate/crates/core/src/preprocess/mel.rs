//! Log-mel spectrogram front end and WAV decoding.
//!
//! Framing convention: the waveform is zero-padded by `window_samples / 2` on both sides and
//! exactly `floor(len / hop_samples)` frames are taken, frame `t` starting at padded offset
//! `t * hop_samples`. Audio shorter than one hop therefore has no frames and is rejected.

use std::f32::consts::PI;
use std::io::Cursor;
use std::path::Path;

use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate_hz: 16_000,
            n_mels: 80,
            window_samples: 400,
            hop_samples: 160,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.hop_samples == 0 || self.hop_samples > self.window_samples {
            return Err(Error::Config("hop_samples must be in 1..=window_samples".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop_samples
    }
}

/// Dense row-major `rows x cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Slaney-normalized triangular filterbank, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f32>> {
    let n_bins = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    (up.min(down).max(0.0) * norm) as f32
                })
                .collect()
        })
        .collect()
}

/// Natural-log mel energies, `floor(len / hop)` frames by `n_mels`.
pub fn compute_log_mel(samples: &[f32], sample_rate: u32, cfg: &MelConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if sample_rate != cfg.sample_rate_hz {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate_hz,
            actual: sample_rate,
        });
    }
    let n_frames = cfg.frame_count(samples.len());
    if n_frames == 0 {
        return Err(Error::EmptyAudio);
    }
    let n_fft = cfg.window_samples;
    let pad = n_fft / 2;
    let mut padded = vec![0f32; samples.len() + 2 * pad];
    padded[pad..pad + samples.len()].copy_from_slice(samples);

    // periodic Hann
    let window: Vec<f32> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f32 / n_fft as f32).cos())
        .collect();
    let filters = mel_filterbank(cfg.sample_rate_hz, n_fft, cfg.n_mels);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    let mut power = vec![0f32; n_bins];
    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    let floor = cfg.log_floor;
    for t in 0..n_frames {
        let start = t * cfg.hop_samples;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex32::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &filters {
            let energy: f64 = filt.iter().zip(&power).map(|(&w, &p)| (w * p) as f64).sum();
            out.push(energy.max(floor).ln() as f32);
        }
    }
    FeatureMatrix::new(n_frames, cfg.n_mels, out)
}

/// Mono samples in [-1, 1] plus sample rate. Only 16-bit integer PCM is accepted;
/// multi-channel audio is averaged down to mono.
pub fn decode_wav_bytes(bytes: &[u8], name: &str) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::decode(name, e))?;
    read_wav(reader, name)
}

pub fn read_wav_file(path: &Path) -> Result<(Vec<f32>, u32)> {
    if !path.exists() {
        return Err(Error::MissingMedia(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| Error::decode(path.display(), e))?;
    read_wav(reader, &path.display().to_string())
}

fn read_wav<R: std::io::Read>(reader: hound::WavReader<R>, name: &str) -> Result<(Vec<f32>, u32)> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::decode(name, "expected 16-bit PCM"));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::decode(name, e))?;
    let mono = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

pub fn encode_wav_bytes(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(|e| Error::decode("wav", e))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| Error::decode("wav", e))?;
        }
        writer.finalize().map_err(|e| Error::decode("wav", e))?;
    }
    Ok(cursor.into_inner())
}

/// Linear-interpolation resampler used before [`compute_log_mel`] when the source rate differs.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = (pos - i0 as f64) as f32;
            let a = samples[i0.min(samples.len() - 1)];
            let b = samples[(i0 + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}
