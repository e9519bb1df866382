//! Named-tensor weight archive.
//!
//! File layout (bit-exact contract):
//! - 8 bytes: little-endian unsigned header length `H`
//! - `H` bytes: UTF-8 JSON object mapping each tensor name to
//!   `{"dtype": "f32"|"f64", "shape": [...], "offset": ..., "nbytes": ...}`,
//!   plus an optional `"__metadata__"` entry of string key/values
//! - raw little-endian tensor buffer; offsets index into this buffer and are
//!   8-byte aligned.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
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

/// One stored tensor: dtype, shape, and raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorEntry {
    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: DType::F64,
            shape,
            data,
        }
    }

    pub fn from_f32s(shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: DType::F32,
            shape,
            data,
        }
    }

    /// Values widened to f64 (exact for both stored dtypes).
    pub fn to_f64s(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// In-memory archive: unique tensor names plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorArchive {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

const METADATA_KEY: &str = "__metadata__";

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl NamedTensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, entry: TensorEntry) {
        self.tensors.insert(name.to_string(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        let path = path.as_ref();
        let io_err = |source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, entry) in &self.tensors {
            let nbytes = entry.data.len();
            let expected = entry.shape.iter().product::<usize>() * entry.dtype.size();
            if nbytes != expected {
                return Err(ArchiveError::Tensor {
                    name: name.clone(),
                    msg: format!("byte length {nbytes} does not match shape/dtype ({expected})"),
                });
            }
            let he = HeaderEntry {
                dtype: entry.dtype,
                shape: entry.shape.clone(),
                offset,
                nbytes,
            };
            header.insert(name.clone(), serde_json::to_value(&he).unwrap());
            offset = align8(offset + nbytes);
        }
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).unwrap(),
            );
        }
        let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
            .map_err(|e| ArchiveError::Header(e.to_string()))?;

        let mut file = File::create(path).map_err(io_err)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(&header_bytes).map_err(io_err)?;
        let mut cursor = 0usize;
        for entry in self.tensors.values() {
            file.write_all(&entry.data).map_err(io_err)?;
            cursor += entry.data.len();
            let pad = align8(cursor) - cursor;
            if pad > 0 {
                file.write_all(&vec![0u8; pad]).map_err(io_err)?;
                cursor += pad;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref();
        let io_err = |source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = File::open(path).map_err(io_err)?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| ArchiveError::Header("file shorter than 8-byte length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| ArchiveError::Header(format!("truncated header (expected {header_len} bytes)")))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&header_bytes)
                .map_err(|e| ArchiveError::Header(e.to_string()))?;
        let mut buffer = Vec::new();
        file.read_to_end(&mut buffer).map_err(io_err)?;

        let mut archive = Self::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata = serde_json::from_value(value)
                    .map_err(|e| ArchiveError::Header(format!("bad metadata: {e}")))?;
                continue;
            }
            let he: HeaderEntry = serde_json::from_value(value).map_err(|e| ArchiveError::Tensor {
                name: name.clone(),
                msg: e.to_string(),
            })?;
            if he.offset % 8 != 0 {
                return Err(ArchiveError::Tensor {
                    name,
                    msg: format!("offset {} not 8-byte aligned", he.offset),
                });
            }
            let expected = he.shape.iter().product::<usize>() * he.dtype.size();
            if he.nbytes != expected {
                return Err(ArchiveError::Tensor {
                    name,
                    msg: format!("nbytes {} does not match shape/dtype ({expected})", he.nbytes),
                });
            }
            let end = he.offset.checked_add(he.nbytes).ok_or_else(|| ArchiveError::Tensor {
                name: name.clone(),
                msg: "offset overflow".into(),
            })?;
            if end > buffer.len() {
                return Err(ArchiveError::Tensor {
                    name,
                    msg: format!("data range {}..{end} exceeds buffer ({})", he.offset, buffer.len()),
                });
            }
            archive.insert(
                &name,
                TensorEntry {
                    dtype: he.dtype,
                    shape: he.shape,
                    data: buffer[he.offset..end].to_vec(),
                },
            );
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn save_then_load_is_bit_identical() {
        let mut a = NamedTensorArchive::new();
        a.insert("w1", TensorEntry::from_f64s(vec![2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]));
        a.insert("w2", TensorEntry::from_f32s(vec![3], &[0.5, -1.5, 2.25]));
        a.metadata.insert("epoch".into(), "3".into());
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ntar");
        a.save(&path).unwrap();
        let b = NamedTensorArchive::load(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offsets_are_eight_byte_aligned() {
        let mut a = NamedTensorArchive::new();
        a.insert("a", TensorEntry::from_f32s(vec![1], &[1.0])); // 4 bytes -> pad to 8
        a.insert("b", TensorEntry::from_f64s(vec![1], &[2.0]));
        let dir = tempdir().unwrap();
        let path = dir.path().join("align.ntar");
        a.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["b"]["offset"], 8);
        let b = NamedTensorArchive::load(&path).unwrap();
        assert_eq!(b.get("b").unwrap().to_f64s(), vec![2.0]);
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ntar");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(5u64).to_le_bytes());
        bytes.extend_from_slice(b"notjs");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            NamedTensorArchive::load(&path),
            Err(ArchiveError::Header(_))
        ));
        std::fs::write(&path, [1, 2, 3]).unwrap();
        assert!(matches!(
            NamedTensorArchive::load(&path),
            Err(ArchiveError::Header(_))
        ));
    }

    #[test]
    fn nbytes_shape_disagreement_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.ntar");
        let header = r#"{"w":{"dtype":"f64","shape":[4],"offset":0,"nbytes":16}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, &bytes).unwrap();
        match NamedTensorArchive::load(&path) {
            Err(ArchiveError::Tensor { name, .. }) => assert_eq!(name, "w"),
            other => panic!("expected tensor error, got {other:?}"),
        }
    }

    #[test]
    fn f32_round_trips_through_f64_exactly() {
        let vals: Vec<f32> = vec![0.1, -3.75, 1e-20, 123456.78];
        let entry = TensorEntry::from_f32s(vec![4], &vals);
        let widened = entry.to_f64s();
        for (w, v) in widened.iter().zip(&vals) {
            assert_eq!(*w as f32, *v);
        }
    }
}
