//! Named-tensor archive (`.bpta`) used for weights, checkpoints, text banks
//! and exported heatmaps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BPTA" | version: u32 | header_len: u64 | header: JSON (header_len bytes)
//!        | payload: concatenated row-major tensor bytes | crc32(payload): u32
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, offset, byte_len}`,
//! with `offset` relative to the start of the payload region. Entries are
//! written in name order so that saving the same tensors always yields the
//! same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"BPTA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor archive (bad magic bytes)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("payload checksum failed: stored {stored:?}, computed {computed:#010x}")]
    ChecksumMismatch { stored: Option<u32>, computed: u32 },
    #[error("tensor `{0}` missing from archive")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor together with the dtype it is stored as on disk.
///
/// Values are always held as `f64` in memory; `F32` entries are rounded on
/// write. Reading an `F32` entry back is exact, so save/load/save is
/// bit-identical for both dtypes.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub data: ArrayD<f64>,
}

impl StoredTensor {
    pub fn new(dtype: DType, data: ArrayD<f64>) -> Self {
        Self { dtype, data }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

/// Ordered collection of named tensors as read from or written to disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))
    }

    /// Fetches `name` and checks it has exactly `shape`.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&StoredTensor, ArchiveError> {
        let t = self.get(name)?;
        if t.data.shape() != shape {
            return Err(ArchiveError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.data.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            // iter() walks in logical (row-major) order regardless of layout
            match t.dtype {
                DType::F32 => {
                    for &v in t.data.iter() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in t.data.iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: t.dtype,
                    shape: t.data.shape().to_vec(),
                    offset,
                    byte_len: payload.len() as u64 - offset,
                },
            );
        }
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(ArchiveError::Header("file ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ArchiveError::Header("file ends inside the header".into()))?;
        let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| ArchiveError::Header(e.to_string()))?;

        let mut payload_len = 0u64;
        for (name, e) in &header {
            let numel: usize = e.shape.iter().product();
            if (numel * e.dtype.size()) as u64 != e.byte_len {
                return Err(ArchiveError::Header(format!(
                    "tensor `{name}`: byte_len {} does not match shape {:?}",
                    e.byte_len, e.shape
                )));
            }
            payload_len = payload_len.max(e.offset + e.byte_len);
        }
        let payload_len = payload_len as usize;

        // A short file means the stored checksum is absent or misplaced, so
        // this is reported as a checksum failure rather than a parse error.
        let rest = &bytes[header_end..];
        if rest.len() != payload_len + 4 {
            let avail = &rest[..rest.len().min(payload_len)];
            let stored = (rest.len() >= payload_len + 4).then(|| {
                u32::from_le_bytes(rest[payload_len..payload_len + 4].try_into().unwrap())
            });
            return Err(ArchiveError::ChecksumMismatch {
                stored,
                computed: crc32fast::hash(avail),
            });
        }
        let payload = &rest[..payload_len];
        let stored = u32::from_le_bytes(rest[payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(ArchiveError::ChecksumMismatch {
                stored: Some(stored),
                computed,
            });
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in header {
            let raw = &payload[e.offset as usize..(e.offset + e.byte_len) as usize];
            let values: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let data = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| ArchiveError::Header(format!("tensor `{name}`: {err}")))?;
            tensors.insert(name, StoredTensor { dtype: e.dtype, data });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
