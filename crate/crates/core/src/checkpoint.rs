//! Single-file parameter container, little-endian throughout.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ETHOCKPT"
//! 8       4     u32 format version (currently 1)
//! 12      1     u8 kind: 0 = full model, 1 = adapter-only, 2 = optimizer state
//! 13      4     u32 header length H
//! 17      H     UTF-8 JSON header {"model": ModelConfig, "lora": LoraConfig | null}
//! 17+H    4     u32 array count N
//! then N times:
//!         4     u32 name length K
//!         K     UTF-8 parameter name
//!         4     u32 rows R
//!         4     u32 cols C
//!         8·R·C f64 values, row-major
//! ```
//!
//! Full checkpoints hold every parameter, adapters included. Adapter-only
//! checkpoints hold the LoRA `A`/`B` matrices and the log-temperature; they
//! are loaded on top of a base model with the same configuration. Optimizer
//! checkpoints hold `<param>.m` / `<param>.v` moment estimates per trainable
//! parameter.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{resolve_placement, LoraConfig};
use crate::matrix::Matrix;
use crate::model::{DualEncoder, ModelConfig, ParamKind};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"ETHOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Adapter,
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    lora: Option<LoraConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub arrays: Vec<(String, Matrix<f64>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Full => 0,
            CheckpointKind::Adapter => 1,
            CheckpointKind::Optimizer => 2,
        });
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            lora: self.lora.clone(),
        })?;
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.arrays.len())?;
        for (name, m) in &self.arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows())?;
            put_u32(&mut out, m.cols())?;
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = match c.take(1)?[0] {
            0 => CheckpointKind::Full,
            1 => CheckpointKind::Adapter,
            2 => CheckpointKind::Optimizer,
            k => return Err(Error::Format(format!("unknown kind flag {k}"))),
        };
        let hlen = c.u32()?;
        let header: Header = serde_json::from_slice(c.take(hlen)?)?;
        let n = c.u32()?;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let k = c.u32()?;
            let name = std::str::from_utf8(c.take(k)?)
                .map_err(|e| Error::Format(format!("parameter name: {e}")))?
                .to_string();
            let (r, cols) = (c.u32()?, c.u32()?);
            let len = r
                .checked_mul(cols)
                .and_then(|x| x.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
            let data = c
                .take(len)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Matrix::from_vec(r, cols, data)?));
        }
        if c.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self {
            kind,
            model: header.model,
            lora: header.lora,
            arrays,
        })
    }

    /// Writes atomically: a temporary file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Hex SHA-256 of a byte string; identifies the checkpoint an index was built with.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn same_shape_config(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig {
        rng_seed: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

impl<T: Scalar> DualEncoder<T> {
    pub fn to_checkpoint(&self, kind: CheckpointKind) -> Result<Checkpoint> {
        if kind == CheckpointKind::Optimizer {
            return Err(Error::Config("optimizer checkpoints are written by the trainer".into()));
        }
        if kind == CheckpointKind::Adapter && self.lora.is_none() {
            return Err(Error::Config("model has no adapters to export".into()));
        }
        let arrays = self
            .params
            .entries()
            .filter(|(_, e)| match kind {
                CheckpointKind::Full => true,
                _ => e.kind != ParamKind::Base,
            })
            .map(|(_, e)| (e.name.clone(), e.value.cast()))
            .collect();
        Ok(Checkpoint {
            kind,
            model: self.config.clone(),
            lora: self.lora.clone(),
            arrays,
        })
    }

    fn assign_arrays(&mut self, arrays: &[(String, Matrix<f64>)]) -> Result<()> {
        for (name, m) in arrays {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            self.params.set_value(id, m.cast())?;
        }
        Ok(())
    }

    fn attach_from(&mut self, lora: &LoraConfig) -> Result<()> {
        let plan = resolve_placement(
            lora.placement,
            self.vision.blocks.len(),
            self.text.blocks.len(),
            &lora.target_kinds,
        )?;
        self.attach_lora(&plan, lora)?;
        Ok(())
    }

    /// Rebuilds a model from a full checkpoint; every parameter must be present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Full {
            return Err(Error::Format("adapter-only checkpoint needs a base model".into()));
        }
        let mut model = Self::new_toy(ckpt.model.clone())?;
        if let Some(lora) = &ckpt.lora {
            model.attach_from(lora)?;
        }
        if ckpt.arrays.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, model expects {}",
                ckpt.arrays.len(),
                model.params.len()
            )));
        }
        model.assign_arrays(&ckpt.arrays)?;
        Ok(model)
    }

    /// Attaches and fills adapters from an adapter-only checkpoint.
    pub fn load_adapters(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != CheckpointKind::Adapter {
            return Err(Error::Format("expected an adapter-only checkpoint".into()));
        }
        if !same_shape_config(&self.config, &ckpt.model) {
            return Err(Error::Config("adapter checkpoint was made for a different model configuration".into()));
        }
        let lora = ckpt
            .lora
            .as_ref()
            .ok_or_else(|| Error::Format("adapter checkpoint without LoRA config".into()))?;
        self.attach_from(lora)?;
        self.assign_arrays(&ckpt.arrays)
    }

    pub fn save(&self, path: &Path, kind: CheckpointKind) -> Result<()> {
        self.to_checkpoint(kind)?.save(path)
    }

    /// Loads a full checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{Placement, TargetKind};

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            encoder_width: 8,
            max_text_len: 8,
            frame_height: 4,
            frame_width: 4,
            patch_size: 2,
            vision_layers: 2,
            text_layers: 2,
            attention_heads: 2,
            mlp_ratio: 2,
            rng_seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn full_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = DualEncoder::<f64>::new(cfg()).unwrap();
        let plan = resolve_placement(Placement::Upper, 2, 2, &TargetKind::ALL).unwrap();
        m.attach_lora(&plan, &LoraConfig::default()).unwrap();
        m.save(&path, CheckpointKind::Full).unwrap();
        let back = DualEncoder::<f64>::load(&path).unwrap();
        for ((_, a), (_, b)) in m.params().entries().zip(back.params().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
        let bytes = read_file(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[12], 0);
        assert_eq!(back.to_checkpoint(CheckpointKind::Full).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn adapter_checkpoint_restores_on_base() {
        let base = DualEncoder::<f64>::new(cfg()).unwrap();
        let mut tuned = base.clone();
        let plan = resolve_placement(Placement::Vertical, 2, 2, &TargetKind::ALL).unwrap();
        tuned.attach_lora(&plan, &LoraConfig::default()).unwrap();
        let ids: Vec<_> = tuned
            .params()
            .entries()
            .filter(|(_, e)| e.kind == ParamKind::LoraB)
            .map(|(id, e)| (id, e.value.shape()))
            .collect();
        for (id, (r, c)) in ids {
            tuned.params_mut().set_value(id, Matrix::filled(r, c, 0.01)).unwrap();
        }
        tuned.set_temperature(0.2).unwrap();
        let ck = tuned.to_checkpoint(CheckpointKind::Adapter).unwrap();
        assert!(ck.arrays.iter().all(|(n, _)| n.contains(".lora_") || n == "log_tau"));
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut restored = base.clone();
        restored.load_adapters(&ck).unwrap();
        for ((_, a), (_, b)) in tuned.params().entries().zip(restored.params().entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(DualEncoder::<f64>::from_checkpoint(&ck).is_err());
        assert!(base.to_checkpoint(CheckpointKind::Adapter).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = DualEncoder::<f64>::new(cfg()).unwrap();
        let bytes = m.to_checkpoint(CheckpointKind::Full).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn fingerprint_is_sha256_hex() {
        assert_eq!(
            fingerprint(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
