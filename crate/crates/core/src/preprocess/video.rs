//! Face video preparation: frame sampling, face cropping and frame decoding.

use std::io::Read;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CROP_SIZE: usize = 96;
pub const CROP_CHANNELS: usize = 3;
pub const DEFAULT_FPS: f32 = 25.0;

/// Sampled face crops: `len` crops of 96x96x3 values in [0, 1], stored HWC per crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceCropSequence {
    pub crops: Vec<f32>,
    pub source_frame_indices: Vec<usize>,
    pub fps: f32,
}

impl FaceCropSequence {
    pub const CROP_LEN: usize = CROP_SIZE * CROP_SIZE * CROP_CHANNELS;

    pub fn new(crops: Vec<f32>, source_frame_indices: Vec<usize>, fps: f32) -> Result<Self> {
        if source_frame_indices.is_empty() {
            return Err(Error::EmptyVideo);
        }
        if crops.len() != source_frame_indices.len() * Self::CROP_LEN {
            return Err(Error::ShapeMismatch(format!(
                "{} crop values for {} crops of {}",
                crops.len(),
                source_frame_indices.len(),
                Self::CROP_LEN
            )));
        }
        if source_frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ShapeMismatch("frame indices must be strictly increasing".into()));
        }
        if crops.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch("crop values must lie in [0, 1]".into()));
        }
        Ok(FaceCropSequence {
            crops,
            source_frame_indices,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.source_frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_frame_indices.is_empty()
    }

    pub fn crop(&self, i: usize) -> &[f32] {
        &self.crops[i * Self::CROP_LEN..(i + 1) * Self::CROP_LEN]
    }
}

/// Indices `0, stride, 2*stride, ...` below `frames.len()`.
pub fn sample_frames<T>(frames: &[T], stride: usize) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(Error::EmptyVideo);
    }
    if stride == 0 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    Ok((0..frames.len()).step_by(stride).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

pub trait FaceDetector: Send + Sync {
    /// Box around the most prominent face, if any.
    fn detect(&self, frame: &RgbImage) -> Option<BoundingBox>;
}

/// Reports the largest centred square as the face region.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterSquareDetector;

impl FaceDetector for CenterSquareDetector {
    fn detect(&self, frame: &RgbImage) -> Option<BoundingBox> {
        Some(center_square(frame.width(), frame.height()))
    }
}

fn center_square(width: u32, height: u32) -> BoundingBox {
    let side = width.min(height);
    BoundingBox {
        x: (width - side) / 2,
        y: (height - side) / 2,
        width: side,
        height: side,
    }
}

/// Expands a box to a square around its centre, shifted and clamped to lie inside the frame.
fn squarify(b: BoundingBox, width: u32, height: u32) -> BoundingBox {
    let side = b.width.max(b.height).min(width).min(height).max(1);
    let cx = b.x as i64 + b.width as i64 / 2;
    let cy = b.y as i64 + b.height as i64 / 2;
    let x = (cx - side as i64 / 2).clamp(0, (width - side) as i64) as u32;
    let y = (cy - side as i64 / 2).clamp(0, (height - side) as i64) as u32;
    BoundingBox {
        x,
        y,
        width: side,
        height: side,
    }
}

/// Result of cropping a single frame.
#[derive(Debug, Clone)]
pub struct Crop {
    pub pixels: Vec<f32>,
    /// True when the detector found nothing and the centre square was used.
    pub fallback: bool,
}

/// Crops the detected face (or the centre square) and resizes it to 96x96.
pub fn crop_face(frame: &RgbImage, detector: &dyn FaceDetector) -> Result<Crop> {
    let (w, h) = frame.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::decode("frame", "frame has zero size"));
    }
    let (region, fallback) = match detector.detect(frame) {
        Some(b) if b.width > 0 && b.height > 0 && b.x < w && b.y < h => (squarify(b, w, h), false),
        _ => (center_square(w, h), true),
    };
    let sub = image::imageops::crop_imm(frame, region.x, region.y, region.width, region.height).to_image();
    let resized = image::imageops::resize(&sub, CROP_SIZE as u32, CROP_SIZE as u32, FilterType::Triangle);
    let pixels = resized.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Crop { pixels, fallback })
}

/// Samples every `stride`-th frame and crops each one. Returns the sequence and the number of
/// frames that needed the centre-square fallback.
pub fn crops_from_frames(
    frames: &[RgbImage],
    fps: f32,
    stride: usize,
    detector: &dyn FaceDetector,
) -> Result<(FaceCropSequence, usize)> {
    let indices = sample_frames(frames, stride)?;
    let mut crops = Vec::with_capacity(indices.len() * FaceCropSequence::CROP_LEN);
    let mut fallbacks = 0;
    for &i in &indices {
        let crop = crop_face(&frames[i], detector)?;
        fallbacks += crop.fallback as usize;
        crops.extend_from_slice(&crop.pixels);
    }
    if fallbacks > 0 {
        tracing::warn!(fallbacks, "face detector found nothing; used centre crops");
    }
    Ok((FaceCropSequence::new(crops, indices, fps)?, fallbacks))
}

/// Decoded frames plus frame rate.
pub struct DecodedVideo {
    pub frames: Vec<RgbImage>,
    pub fps: f32,
}

pub trait VideoDecoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<DecodedVideo>;
}

/// Decodes a directory of numbered PNG frames (`frame_000.png`, `1.png`, ...), ordered by the
/// number in the file name. An optional `fps.txt` sets the frame rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct PngDirectoryDecoder;

impl VideoDecoder for PngDirectoryDecoder {
    fn decode(&self, path: &Path) -> Result<DecodedVideo> {
        if !path.exists() {
            return Err(Error::MissingMedia(path.to_path_buf()));
        }
        if !path.is_dir() {
            return Err(Error::decode(
                path.display(),
                "only PNG frame directories are supported by the builtin decoder",
            ));
        }
        let mut entries = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                entries.push((frame_number(name), p));
            }
        }
        entries.sort();
        let mut frames = Vec::with_capacity(entries.len());
        for (_, p) in &entries {
            let bytes = std::fs::read(p)?;
            frames.push(decode_png(&bytes, &p.display().to_string())?);
        }
        if frames.is_empty() {
            return Err(Error::EmptyVideo);
        }
        let fps = std::fs::read_to_string(path.join("fps.txt"))
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(DEFAULT_FPS);
        Ok(DecodedVideo { frames, fps })
    }
}

fn frame_number(stem: &str) -> (u64, String) {
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    (digits.parse().unwrap_or(u64::MAX), stem.to_string())
}

pub fn decode_png(bytes: &[u8], name: &str) -> Result<RgbImage> {
    let img =
        image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::decode(name, e))?;
    Ok(img.to_rgb8())
}

/// Decodes a tar archive of numbered PNG frames, as uploaded to the dialogue service.
pub fn decode_frame_archive(bytes: &[u8], name: &str) -> Result<DecodedVideo> {
    let mut archive = tar::Archive::new(bytes);
    let mut entries = Vec::new();
    let mut fps = DEFAULT_FPS;
    for entry in archive.entries().map_err(|e| Error::decode(name, e))? {
        let mut entry = entry.map_err(|e| Error::decode(name, e))?;
        let path = entry.path().map_err(|e| Error::decode(name, e))?.into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| Error::decode(name, e))?;
        let file = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if file == "fps.txt" {
            fps = String::from_utf8_lossy(&data).trim().parse().unwrap_or(DEFAULT_FPS);
        } else if file.to_ascii_lowercase().ends_with(".png") {
            let stem = file.trim_end_matches(|c: char| c != '.').trim_end_matches('.');
            entries.push((frame_number(stem), data));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let frames = entries
        .iter()
        .map(|(n, d)| decode_png(d, &format!("{name}:{}", n.1)))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::EmptyVideo);
    }
    Ok(DecodedVideo { frames, fps })
}

/// Packs frames into the tar-of-PNG layout read by [`decode_frame_archive`].
pub fn encode_frame_archive(frames: &[RgbImage]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (i, frame) in frames.iter().enumerate() {
        let png = encode_png(frame)?;
        let mut header = tar::Header::new_gnu();
        header.set_size(png.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, format!("frame_{i:04}.png"), png.as_slice())?;
    }
    Ok(builder.into_inner()?)
}

pub fn encode_png(frame: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    frame
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::decode("png", e))?;
    Ok(out.into_inner())
}
