//! On-disk index, little-endian throughout.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ETHOIDX1"
//! 8       4     u32 format version (currently 1)
//! 12      4     u32 embedding dimension d
//! 16      8     u64 entry count N
//! 24      1     u8 normalized flag (1 = every embedding has unit L2 norm)
//! 25      64    ASCII hex SHA-256 fingerprint of the encoder checkpoint
//! 89            N entries, each:
//!         4     u32 clip id length I
//!         I     UTF-8 clip id
//!         4     u32 metadata length M
//!         M     UTF-8 JSON metadata (see `EntryMeta`)
//!         4·d   f32 embedding
//! ```
//!
//! Nothing follows the last entry.

use std::collections::HashSet;
use std::path::Path;

use ethoclip::checkpoint::{read_file, write_atomic};
use serde::{Deserialize, Serialize};

use crate::IndexError;

pub const MAGIC: &[u8; 8] = b"ETHOIDX1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 89;
const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub video_id: String,
    pub t_init: f64,
    pub t_end: f64,
    pub n_frames: usize,
    pub frame_indices: Vec<usize>,
    pub behaviors: Vec<String>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub clip_id: String,
    pub embedding: Vec<f32>,
    pub meta: EntryMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Index {
    pub dim: usize,
    pub normalized: bool,
    pub fingerprint: String,
    pub entries: Vec<IndexEntry>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), IndexError> {
    let v = u32::try_from(v).map_err(|_| IndexError::Format(format!("length {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            IndexError::Format(format!("truncated file: {what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self, what: &str) -> Result<&'a str, IndexError> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| IndexError::Format(format!("{what}: {e}")))
    }
}

impl Index {
    pub fn new(dim: usize, fingerprint: impl Into<String>, entries: Vec<IndexEntry>) -> Result<Self, IndexError> {
        let idx = Self {
            dim,
            normalized: true,
            fingerprint: fingerprint.into(),
            entries,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dim == 0 {
            return Err(IndexError::Format("embedding dimension must be positive".into()));
        }
        if self.fingerprint.len() != 64 || !self.fingerprint.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(IndexError::Format(format!("fingerprint {:?} is not 64 hex digits", self.fingerprint)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(IndexError::Format(format!("duplicate clip id {}", e.clip_id)));
            }
            if e.embedding.len() != self.dim {
                return Err(IndexError::Format(format!(
                    "{}: embedding has {} values, index dimension is {}",
                    e.clip_id,
                    e.embedding.len(),
                    self.dim
                )));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Format(format!("{}: non-finite embedding", e.clip_id)));
            }
            if self.normalized {
                let n = e.embedding.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(IndexError::Format(format!("{}: embedding norm {n} is not 1", e.clip_id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.len() * (4 * self.dim + 256));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, self.dim)?;
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.push(u8::from(self.normalized));
        out.extend_from_slice(self.fingerprint.to_ascii_lowercase().as_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for e in &self.entries {
            put_u32(&mut out, e.clip_id.len())?;
            out.extend_from_slice(e.clip_id.as_bytes());
            let meta = serde_json::to_vec(&e.meta).map_err(|err| IndexError::Format(err.to_string()))?;
            put_u32(&mut out, meta.len())?;
            out.extend_from_slice(&meta);
            for v in &e.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(IndexError::Format("not an index file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version as u32 != FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "index format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let dim = r.u32("dimension")?;
        let count = u64::from_le_bytes(r.take(8, "count")?.try_into().expect("8 bytes"));
        let normalized = match r.take(1, "normalized flag")?[0] {
            0 => false,
            1 => true,
            f => return Err(IndexError::Format(format!("bad normalized flag {f}"))),
        };
        let fingerprint = std::str::from_utf8(r.take(64, "fingerprint")?)
            .map_err(|e| IndexError::Format(format!("fingerprint: {e}")))?
            .to_string();
        let mut entries = Vec::new();
        for i in 0..count {
            let clip_id = r.str(&format!("entry {i} clip id"))?.to_string();
            let meta = r.str(&format!("entry {i} metadata"))?;
            let meta: EntryMeta =
                serde_json::from_str(meta).map_err(|e| IndexError::Format(format!("entry {i} metadata: {e}")))?;
            let raw = r.take(4 * dim, &format!("entry {i} embedding"))?;
            let embedding = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(IndexEntry {
                clip_id,
                embedding,
                meta,
            });
        }
        if r.pos != buf.len() {
            return Err(IndexError::Format(format!(
                "{} trailing bytes after {count} entries",
                buf.len() - r.pos
            )));
        }
        let idx = Self {
            dim,
            normalized,
            fingerprint,
            entries,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        Ok(write_atomic(path, &self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&read_file(path)?)
    }
}
