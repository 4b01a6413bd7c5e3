//! `XPERTCK1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XPERTCK1" | u64 header length | JSON header | zero padding to 8 bytes | f32 payload
//! ```
//!
//! The header maps each tensor name to `{"dtype", "length", "offset", "shape"}`
//! with offsets relative to the payload start. Keys are sorted, regions are
//! written contiguously in key order, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"XPERTCK1";
const PREAMBLE: usize = 16;
const DTYPE_F32: &str = "f32";

pub type TensorMap = BTreeMap<String, Tensor<f32>>;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"XPERTCK1\"")]
    BadMagic(Vec<u8>),
    #[error("header length {declared} exceeds the {available} bytes available")]
    HeaderLength { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    HeaderJson(String),
    #[error("non-zero byte in header padding")]
    Padding,
    #[error("payload truncated: tensor {name:?} ends at byte {end} but the payload has {available}")]
    Truncated { name: String, end: u64, available: u64 },
    #[error("tensor regions {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
    #[error("payload coverage gap before tensor {0:?}")]
    Gap(String),
    #[error("{0} unclaimed bytes after the last tensor")]
    TrailingBytes(u64),
    #[error("tensor {name:?} has unknown dtype {dtype:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?} has invalid shape {shape:?}")]
    InvalidShape { name: String, shape: Vec<usize> },
    #[error("tensor {name:?} declares {declared} bytes, its shape needs {expected}")]
    LengthMismatch { name: String, declared: u64, expected: u64 },
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("checkpoint has no tensors")]
    Empty,
    #[error("tensor {name:?}: {source}")]
    Tensor { name: String, source: TensorError },
    #[error("missing tensor {0:?}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    length: u64,
    offset: u64,
    shape: Vec<usize>,
}

/// Public view of one header record, as emitted by `inspect`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Names are `.`-joined segments, each an identifier or a non-negative integer.
pub fn validate_name(name: &str) -> Result<(), CheckpointError> {
    let ok = !name.is_empty()
        && name.split('.').all(|seg| {
            let mut chars = seg.chars();
            match chars.next() {
                Some(c) if c.is_ascii_digit() => seg.chars().all(|c| c.is_ascii_digit()),
                Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
                }
                _ => false,
            }
        });
    if ok {
        Ok(())
    } else {
        Err(CheckpointError::InvalidName(name.to_owned()))
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

pub fn encode_checkpoint(entries: &TensorMap) -> Result<Vec<u8>, CheckpointError> {
    if entries.is_empty() {
        return Err(CheckpointError::Empty);
    }
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in entries {
        validate_name(name)?;
        let length = (t.len() * 4) as u64;
        header.insert(
            name.as_str(),
            HeaderEntry {
                dtype: DTYPE_F32.into(),
                length,
                offset,
                shape: t.shape().to_vec(),
            },
        );
        offset += length;
    }
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::HeaderJson(e.to_string()))?;
    let payload_start = align8(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(payload_start + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for t in entries.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(entries: &TensorMap, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(entries)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(BTreeMap<String, HeaderEntry>, usize), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(8)].to_vec()));
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::HeaderLength {
            declared: 0,
            available: (bytes.len() - 8) as u64,
        });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - PREAMBLE) as u64;
    if declared > available {
        return Err(CheckpointError::HeaderLength { declared, available });
    }
    let json_end = PREAMBLE + declared as usize;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[PREAMBLE..json_end])
        .map_err(|e| CheckpointError::HeaderJson(e.to_string()))?;
    let payload_start = align8(json_end);
    if payload_start > bytes.len() {
        return Err(CheckpointError::HeaderLength { declared, available });
    }
    if bytes[json_end..payload_start].iter().any(|&b| b != 0) {
        return Err(CheckpointError::Padding);
    }
    if header.is_empty() {
        return Err(CheckpointError::Empty);
    }
    for (name, e) in &header {
        validate_name(name)?;
        if e.dtype != DTYPE_F32 {
            return Err(CheckpointError::UnknownDtype {
                name: name.clone(),
                dtype: e.dtype.clone(),
            });
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(CheckpointError::InvalidShape {
                name: name.clone(),
                shape: e.shape.clone(),
            });
        }
        let expected = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| CheckpointError::InvalidShape {
                name: name.clone(),
                shape: e.shape.clone(),
            })?;
        if expected != e.length {
            return Err(CheckpointError::LengthMismatch {
                name: name.clone(),
                declared: e.length,
                expected,
            });
        }
    }
    Ok((header, payload_start))
}

/// Checks that regions are ascending, disjoint and tile `[0, payload_len)`.
fn check_layout(header: &BTreeMap<String, HeaderEntry>, payload_len: u64) -> Result<(), CheckpointError> {
    let mut regions: Vec<(&String, &HeaderEntry)> = header.iter().collect();
    regions.sort_by_key(|(name, e)| (e.offset, (*name).clone()));
    let mut cursor = 0u64;
    let mut prev: Option<&String> = None;
    for (name, e) in regions {
        if e.offset < cursor {
            return Err(CheckpointError::Overlap {
                first: prev.cloned().unwrap_or_default(),
                second: name.clone(),
            });
        }
        if e.offset > cursor {
            return Err(CheckpointError::Gap(name.clone()));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| CheckpointError::InvalidShape {
            name: name.clone(),
            shape: e.shape.clone(),
        })?;
        if end > payload_len {
            return Err(CheckpointError::Truncated {
                name: name.clone(),
                end,
                available: payload_len,
            });
        }
        cursor = end;
        prev = Some(name);
    }
    if cursor < payload_len {
        return Err(CheckpointError::TrailingBytes(payload_len - cursor));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TensorMap, CheckpointError> {
    let (header, payload_start) = parse_header(bytes)?;
    let payload = &bytes[payload_start..];
    check_layout(&header, payload.len() as u64)?;
    header
        .into_iter()
        .map(|(name, e)| {
            let start = e.offset as usize;
            let raw = &payload[start..start + e.length as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|source| CheckpointError::Tensor {
                name: name.clone(),
                source,
            })?;
            Ok((name, t))
        })
        .collect()
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Header records of a fully validated file, in name order.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, CheckpointError> {
    let map = read_checkpoint(path)?;
    Ok(map
        .into_iter()
        .map(|(name, t)| ManifestEntry {
            name,
            dtype: DTYPE_F32.into(),
            shape: t.shape().to_vec(),
        })
        .collect())
}

pub(crate) fn take_tensor(map: &TensorMap, name: &str) -> Result<Tensor<f32>, CheckpointError> {
    map.get(name)
        .cloned()
        .ok_or_else(|| CheckpointError::Missing(name.to_owned()))
}

pub(crate) fn take_matrix(map: &TensorMap, name: &str) -> Result<Matrix<f32>, CheckpointError> {
    let t = take_tensor(map, name)?;
    let shape = t.shape().to_vec();
    Matrix::from_tensor(t).map_err(|_| CheckpointError::InvalidShape {
        name: name.to_owned(),
        shape,
    })
}

pub(crate) fn take_vector(map: &TensorMap, name: &str) -> Result<Vec<f32>, CheckpointError> {
    let t = take_tensor(map, name)?;
    if t.rank() != 1 {
        return Err(CheckpointError::InvalidShape {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.into_data())
}
