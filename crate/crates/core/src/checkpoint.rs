//! Binary checkpoint format.
//!
//! ```text
//! "DFCK" | u32 version | u32 spec digest | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 data (LE)
//! u64 metadata length | UTF-8 JSON metadata
//! ```
//!
//! All integers are little-endian. The metadata embeds the full model spec
//! and a CRC-32 of the tensor section, so any flipped tensor byte is caught.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Pretrain,
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Accuracy used for model selection (val, or train when val is absent).
    pub selection_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub role: Role,
    pub epoch: usize,
    pub config: Option<TrainConfig>,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredMetadata {
    spec: ModelSpec,
    tensor_crc32: u32,
    #[serde(flatten)]
    meta: Metadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Metadata,
}

impl Checkpoint {
    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.model.spec();
        let tensors = self.model.named_tensors();
        let mut body = Vec::new();
        for (name, t) in &tensors {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                body.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let stored = StoredMetadata {
            spec: spec.clone(),
            tensor_crc32: crc32fast::hash(&body),
            meta: self.meta.clone(),
        };
        let meta = serde_json::to_vec(&stored).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + body.len() + 8 + meta.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&spec.digest().to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic at offset 0".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let spec_digest = r.u32()?;
        let count = r.u32()? as usize;
        let body_start = r.pos;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("tensor name at offset {} is not UTF-8", r.pos - len)))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, tensor));
        }
        let body_crc = crc32fast::hash(&bytes[body_start..r.pos]);
        let meta_len = r.u64()? as usize;
        let meta = r.take(meta_len)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let stored: StoredMetadata = serde_json::from_slice(meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if stored.tensor_crc32 != body_crc {
            return Err(Error::Digest {
                stored: stored.tensor_crc32,
                computed: body_crc,
            });
        }
        let computed = stored.spec.digest();
        if computed != spec_digest {
            return Err(Error::Digest {
                stored: spec_digest,
                computed,
            });
        }
        let model = Model::from_tensors(&stored.spec, tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            model,
            meta: stored.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn describe(spec: &ModelSpec) -> String {
    format!(
        "{} (input {:?}, {} classes, digest {:08x})",
        spec.name,
        spec.input_shape,
        spec.num_classes(),
        spec.digest()
    )
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads a checkpoint whose spec must be exactly `expected`.
pub fn load_model(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ckpt = read(path)?;
    if ckpt.spec().digest() != expected.digest() {
        return Err(Error::SpecDigest {
            expected: describe(expected),
            found: describe(ckpt.spec()),
        });
    }
    Ok(ckpt)
}

/// CRC-32 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{preset, Activation};

    fn ckpt(seed: u64) -> Checkpoint {
        let spec = preset("mlp-s", &[6], 4, Activation::Relu).unwrap();
        Checkpoint {
            model: Model::init_truncated_normal(&spec, 0.5, seed).unwrap(),
            meta: Metadata {
                role: Role::Student,
                epoch: 3,
                config: None,
                metrics: Some(Metrics {
                    selection_accuracy: 0.25,
                    test_accuracy: Some(0.125),
                }),
            },
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let c = ckpt(1);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.model, c.model.rounded_to_f32());
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = ckpt(2).to_bytes();
        let mut tampered = bytes.clone();
        // Inside the first weight tensor.
        tampered[100] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Digest { .. })));

        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn preset_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ckpt(3).save(&path).unwrap();
        let other = preset("teacher-l", &[6], 4, Activation::Relu).unwrap();
        match load_model(&path, &other) {
            Err(Error::SpecDigest { expected, found }) => {
                assert!(expected.contains("teacher-l"));
                assert!(found.contains("mlp-s"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
