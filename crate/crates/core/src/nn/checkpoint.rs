//! Checkpoint files: a JSON manifest indexing named tensors inside a
//! little-endian `f32` blob.
//!
//! Layout: `b"SCOPSCKP"`, manifest length as `u64` LE, manifest JSON, blob.
//! The content hash is SHA-256 over the canonical manifest bytes (sorted keys,
//! `content_hash` omitted) followed by the blob. It doubles as the checkpoint
//! identity and as the embedder version.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Preset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCOPSCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Model family, e.g. `autoencoder` or `classifier`.
    pub kind: String,
    pub preset: Preset,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub content_hash: String,
}

impl CheckpointManifest {
    /// Sorted-key JSON without the hash field.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut m = self.clone();
        m.content_hash.clear();
        let value = serde_json::to_value(&m).expect("manifest serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blob: Vec<u8>,
}

fn digest(manifest: &CheckpointManifest, blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest.canonical_bytes());
    h.update(blob);
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_tensors<T: Scalar>(
        kind: &str,
        preset: Preset,
        config: serde_json::Value,
        named: &[(String, Tensor<T>)],
    ) -> Self {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: blob.len() as u64 - offset,
            });
        }
        let mut manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            preset,
            config,
            tensors,
            content_hash: String::new(),
        };
        manifest.content_hash = digest(&manifest, &blob);
        Checkpoint { manifest, blob }
    }

    pub fn content_hash(&self) -> &str {
        &self.manifest.content_hash
    }

    pub fn tensors<T: Scalar>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out = Vec::with_capacity(self.manifest.tensors.len());
        for e in &self.manifest.tensors {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize)
                .filter(|&end| end <= self.blob.len())
                .ok_or_else(|| Error::Integrity(format!("tensor `{}` lies outside the blob", e.name)))?;
            let data: Vec<T> = self.blob[start..end]
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Integrity(format!("tensor `{}`: {err}", e.name)))?;
            out.push((e.name.clone(), t));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&serde_json::to_value(&self.manifest).expect("manifest"))
            .expect("manifest bytes");
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        out
    }

    /// Parses and re-verifies the content hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Integrity("truncated checkpoint manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let blob = bytes[end..].to_vec();
        let actual = digest(&manifest, &blob);
        if actual != manifest.content_hash {
            return Err(Error::Integrity(format!(
                "checkpoint hash mismatch: manifest says {}, content is {actual}",
                manifest.content_hash
            )));
        }
        Ok(Checkpoint { manifest, blob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::not_found(format!("checkpoint {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Writes `<dir>/<hash>.ckpt` unless it already exists.
    pub fn store_in(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.ckpt", self.content_hash()));
        if !path.exists() {
            self.save(&path)?;
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let named = vec![
            ("a.weight".to_string(), Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.5)),
            ("a.bias".to_string(), Tensor::<f32>::from_fn([2], |i| -(i as f32))),
        ];
        Checkpoint::from_tensors("classifier", Preset::Tiny, serde_json::json!({"num_classes": 2}), &named)
    }

    #[test]
    fn bytes_round_trip_and_verify() {
        let ck = sample();
        assert_eq!(ck.content_hash().len(), 64);
        assert_eq!(ck.manifest.tensors[1].offset, 24);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let t: Vec<(String, Tensor<f32>)> = back.tensors().unwrap();
        assert_eq!(t[0].1.data()[5], 2.5);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Integrity(_))));
    }

    #[test]
    fn hash_depends_on_manifest_and_blob() {
        let a = sample();
        let named = a.tensors::<f32>().unwrap();
        let b = Checkpoint::from_tensors("classifier", Preset::Tiny, serde_json::json!({"num_classes": 3}), &named);
        assert_ne!(a.content_hash(), b.content_hash());
        let c = Checkpoint::from_tensors("classifier", Preset::Tiny, serde_json::json!({"num_classes": 2}), &named);
        assert_eq!(a.content_hash(), c.content_hash());
    }
}
