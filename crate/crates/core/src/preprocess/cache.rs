//! Content-addressed feature cache.
//!
//! One file per utterance per feature kind. File layout (little endian):
//!
//! ```text
//! magic "AVEF" | version u16 | kind u8 | reserved u8 | config hash [32]
//! ndim u32 | dims u64 * ndim | extra_len u32 | extra (JSON) | data f32 * prod(dims)
//! ```
//!
//! Files are written to a temporary name and renamed into place, so concurrent writers of the
//! same entry are harmless.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mel::FeatureMatrix;
use super::video::{FaceCropSequence, CROP_CHANNELS, CROP_SIZE};
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"AVEF";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FeatureKind {
    Mel = 1,
    Faces = 2,
}

impl FeatureKind {
    fn extension(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::Faces => "faces",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub kind: FeatureKind,
    pub config_hash: [u8; 32],
    pub dims: Vec<usize>,
    pub extra: Vec<u8>,
    pub data: Vec<f32>,
}

impl ArrayFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.data.len() * 4 + self.extra.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.extra.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.extra);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |m: &str| Error::decode(name, m);
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        if version != VERSION {
            return Err(bad("unsupported cache version"));
        }
        let kind = match cur.take(2).ok_or_else(|| bad("truncated header"))?[0] {
            1 => FeatureKind::Mel,
            2 => FeatureKind::Faces,
            _ => return Err(bad("unknown feature kind")),
        };
        let config_hash: [u8; 32] = cur.array().ok_or_else(|| bad("truncated header"))?;
        let ndim = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated dims"))?) as usize);
        }
        let extra_len = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let extra = cur.take(extra_len).ok_or_else(|| bad("truncated extra"))?.to_vec();
        let count: usize = dims.iter().product();
        let raw = cur.take(count * 4).ok_or_else(|| bad("truncated data"))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ArrayFile {
            kind,
            config_hash,
            dims,
            extra,
            data,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

#[derive(Serialize, Deserialize)]
struct FaceExtra {
    source_frame_indices: Vec<usize>,
    fps: f32,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(FeatureCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key: hash of kind, config hash and media content.
    pub fn key(kind: FeatureKind, config_hash: &[u8; 32], content: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update([kind as u8]);
        h.update(config_hash);
        h.update(Sha256::digest(content));
        hex::encode(h.finalize())
    }

    pub fn path(&self, kind: FeatureKind, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.{}", kind.extension()))
    }

    pub fn contains(&self, kind: FeatureKind, key: &str) -> bool {
        self.path(kind, key).exists()
    }

    pub fn put_mel(&self, key: &str, config_hash: [u8; 32], mel: &FeatureMatrix) -> Result<()> {
        let file = ArrayFile {
            kind: FeatureKind::Mel,
            config_hash,
            dims: vec![mel.rows, mel.cols],
            extra: Vec::new(),
            data: mel.data.clone(),
        };
        write_atomic(&self.path(FeatureKind::Mel, key), &file.to_bytes())
    }

    pub fn get_mel(&self, key: &str) -> Result<Option<FeatureMatrix>> {
        let Some(file) = self.read(FeatureKind::Mel, key)? else {
            return Ok(None);
        };
        if file.dims.len() != 2 {
            return Err(Error::decode(key, "mel cache entry is not a matrix"));
        }
        Ok(Some(FeatureMatrix::new(file.dims[0], file.dims[1], file.data)?))
    }

    pub fn put_faces(&self, key: &str, config_hash: [u8; 32], faces: &FaceCropSequence) -> Result<()> {
        let extra = serde_json::to_vec(&FaceExtra {
            source_frame_indices: faces.source_frame_indices.clone(),
            fps: faces.fps,
        })?;
        let file = ArrayFile {
            kind: FeatureKind::Faces,
            config_hash,
            dims: vec![faces.len(), CROP_SIZE, CROP_SIZE, CROP_CHANNELS],
            extra,
            data: faces.crops.clone(),
        };
        write_atomic(&self.path(FeatureKind::Faces, key), &file.to_bytes())
    }

    pub fn get_faces(&self, key: &str) -> Result<Option<FaceCropSequence>> {
        let Some(file) = self.read(FeatureKind::Faces, key)? else {
            return Ok(None);
        };
        let extra: FaceExtra = serde_json::from_slice(&file.extra)?;
        Ok(Some(FaceCropSequence::new(
            file.data,
            extra.source_frame_indices,
            extra.fps,
        )?))
    }

    fn read(&self, kind: FeatureKind, key: &str) -> Result<Option<ArrayFile>> {
        let path = self.path(kind, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let file = ArrayFile::from_bytes(&bytes, &path.display().to_string())?;
        if file.kind != kind {
            return Err(Error::decode(path.display(), "feature kind mismatch"));
        }
        Ok(Some(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_file_round_trip_and_corruption() {
        let f = ArrayFile {
            kind: FeatureKind::Mel,
            config_hash: [7; 32],
            dims: vec![2, 3],
            extra: b"{}".to_vec(),
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let bytes = f.to_bytes();
        assert_eq!(ArrayFile::from_bytes(&bytes, "x").unwrap(), f);
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 1], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ArrayFile::from_bytes(&bad, "x").is_err());
    }

    #[test]
    fn key_depends_on_every_input() {
        let a = FeatureCache::key(FeatureKind::Mel, &[0; 32], b"abc");
        assert_ne!(a, FeatureCache::key(FeatureKind::Faces, &[0; 32], b"abc"));
        assert_ne!(a, FeatureCache::key(FeatureKind::Mel, &[1; 32], b"abc"));
        assert_ne!(a, FeatureCache::key(FeatureKind::Mel, &[0; 32], b"abd"));
    }

    #[test]
    fn mel_entries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path()).unwrap();
        let mel = FeatureMatrix::new(2, 2, vec![0.0, -1.0, 2.5, 3.0]).unwrap();
        assert!(cache.get_mel("k").unwrap().is_none());
        cache.put_mel("k", [0; 32], &mel).unwrap();
        assert_eq!(cache.get_mel("k").unwrap().unwrap(), mel);
    }
}
