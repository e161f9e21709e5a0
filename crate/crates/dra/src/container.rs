//! Versioned named-array container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `DRAARRS\0` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `H` (`u64`) |
//! | H | UTF-8 JSON header |
//! | 8·N | array payload as `f64` |
//! | 32 | SHA-256 of every preceding byte |
//!
//! The header is `{"kind", "config", "meta", "arrays": [{"name", "shape",
//! "offset", "len"}]}` where `offset` and `len` count `f64` elements into the
//! payload. Readers reject any version other than [`FORMAT_VERSION`].

use std::fs;
use std::io::Write;
use std::path::Path;

use dra_core::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"DRAARRS\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("incompatible container version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("container integrity check failed: {0}")]
    Integrity(String),
    #[error("container kind is `{found}`, expected `{expected}`")]
    Kind { found: String, expected: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub arrays: ParamStore,
}

impl Container {
    pub fn new(kind: impl Into<String>, arrays: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for p in self.arrays.iter() {
            entries.push(ArrayEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                len: p.data.len(),
            });
            offset += p.data.len();
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(PREFIX + header.len() + offset * 8 + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.arrays.iter() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < PREFIX + DIGEST {
            return Err(ContainerError::Integrity("file is truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ContainerError::Integrity("checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = PREFIX
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| ContainerError::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX..header_end])
            .map_err(|e| ContainerError::Integrity(format!("bad header: {e}")))?;
        let payload = &body[header_end..];
        if payload.len() % 8 != 0 {
            return Err(ContainerError::Integrity("payload is not a whole number of f64".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut arrays = ParamStore::new();
        for e in header.arrays {
            let numel: usize = e.shape.iter().product();
            if numel != e.len || e.offset.checked_add(e.len).is_none_or(|end| end > values.len()) {
                return Err(ContainerError::Integrity(format!("array `{}` is out of bounds", e.name)));
            }
            arrays.push(e.name, e.shape, values[e.offset..e.offset + e.len].to_vec());
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let io = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::Kind {
                found: self.kind.clone(),
                expected: kind.into(),
            });
        }
        Ok(())
    }
}

/// Writes bare feature-network weights (kind `weights`).
pub fn save_weights(params: &ParamStore, path: &Path) -> Result<(), ContainerError> {
    Container::new("weights", params.clone()).write(path)
}

/// Reads a `weights` container as produced by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<ParamStore, ContainerError> {
    let c = Container::read(path)?;
    c.expect_kind("weights")?;
    Ok(c.arrays)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut store = ParamStore::new();
        store.push("a", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
        store.push("b", vec![0], vec![]);
        store.push("c", vec![1], vec![0.1 + 0.2]);
        let mut c = Container::new("test", store);
        c.meta = serde_json::json!({"x": 1});
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta, c.meta);
        for (x, y) in c.arrays.iter().zip(back.arrays.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn flipped_payload_byte_is_an_integrity_error() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Container::from_bytes(&bytes), Err(ContainerError::Integrity(_))));
    }

    #[test]
    fn other_version_is_incompatible() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_and_garbage() {
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..30]), Err(ContainerError::Integrity(_))));
        assert!(matches!(Container::from_bytes(b"hello world"), Err(ContainerError::BadMagic)));
    }
}
