//! Binary checkpoint format.
//!
//! ```text
//! "ADRK"                       magic
//! u32 LE                       format version
//! u32 LE                       tensor count
//! per tensor:
//!   u32 LE name length, UTF-8 name
//!   u32 LE rows, u32 LE cols
//!   rows*cols f64 LE, row-major
//! remaining bytes              UTF-8 JSON manifest
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

pub const MAGIC: &[u8; 4] = b"ADRK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor {name}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: LinalgError,
    },
    #[error("tensor {0} not found")]
    MissingTensor(String),
    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),
}

/// Ordered named matrices plus a JSON manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Matrix)>,
    pub manifest: Value,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            manifest: Value::Object(Default::default()),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::DuplicateTensor(name));
        }
        self.tensors.push((name, m));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_manifest(&mut self, key: &str, value: Value) {
        if let Value::Object(map) = &mut self.manifest {
            map.insert(key.to_string(), value);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        // serde_json maps are sorted, so this is deterministic.
        out.extend_from_slice(
            serde_json::to_string_pretty(&self.manifest)
                .expect("JSON values always serialize")
                .as_bytes(),
        );
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::InvalidName)?
                .to_string();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let raw = r.take(rows * cols * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|source| CheckpointError::Tensor {
                name: name.clone(),
                source,
            })?;
            ckpt.push(name, m)?;
        }
        let rest = &bytes[r.pos..];
        ckpt.manifest = if rest.is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_slice(rest)?
        };
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("backbone.0", Matrix::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]))
            .unwrap();
        c.push("head.0", Matrix::from_rows(&[vec![f64::MIN_POSITIVE]])).unwrap();
        c.set_manifest("seed", json!(7));
        c
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut c = Checkpoint::new();
        c.push("w", Matrix::from_rows(&[vec![1.0]])).unwrap();
        let bytes = c.to_bytes();
        let mut expected = b"ADRK".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend(b"{}");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncation_and_duplicates() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..30]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut c = sample();
        assert!(matches!(
            c.push("head.0", Matrix::zeros(1, 1)),
            Err(CheckpointError::DuplicateTensor(_))
        ));
    }
}
