//! Named-tensor container: `u64` little-endian header length, a JSON index
//! `{name: {dtype, shape, data_offsets}, "__metadata__": {..}}`, then the raw
//! little-endian payload. Byte-compatible with the safetensors layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Real;

const METADATA_KEY: &str = "__metadata__";
const CHECKSUM_KEY: &str = "checksum";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed container: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: checksum mismatch (file is corrupted)")]
    Checksum { path: PathBuf },
    #[error("tensor {name:?} not found")]
    Missing { name: String },
    #[error("tensor {name:?} has dtype {found}, expected {expected}")]
    Dtype { name: String, found: String, expected: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "F64" | "I64" | "U64" => Some(8),
        "F32" | "I32" | "U32" => Some(4),
        "F16" | "BF16" | "I16" | "U16" => Some(2),
        "U8" | "I8" | "BOOL" => Some(1),
        _ => None,
    }
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) & 1) as u32;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let frac = (bits & 0x3ff) as u32;
    let v = match exp {
        0 => (frac as f32) * 2f32.powi(-24),
        31 => {
            if frac == 0 {
                f32::INFINITY
            } else {
                f32::NAN
            }
        }
        e => f32::from_bits(((e + 127 - 15) << 23) | (frac << 13)),
    };
    if sign == 1 {
        -v
    } else {
        v
    }
}

impl RawTensor {
    pub fn from_array<T: Real>(a: &ArrayD<T>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * T::BYTES);
        for &v in a.iter() {
            v.write_le(&mut bytes);
        }
        Self { dtype: T::DTYPE.to_owned(), shape: a.shape().to_vec(), bytes }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Exact read when the dtype matches `T`.
    pub fn to_array<T: Real>(&self, name: &str) -> Result<ArrayD<T>, ContainerError> {
        if self.dtype != T::DTYPE {
            return Err(ContainerError::Dtype { name: name.to_owned(), found: self.dtype.clone(), expected: T::DTYPE.to_owned() });
        }
        let vals: Vec<T> = self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&self.shape), vals).expect("validated shape"))
    }

    /// Widening/narrowing read from any float dtype.
    pub fn to_f32_lossy(&self, name: &str) -> Result<ArrayD<f32>, ContainerError> {
        let vals: Vec<f32> = match self.dtype.as_str() {
            "F32" => self.bytes.chunks_exact(4).map(f32::read_le).collect(),
            "F64" => self.bytes.chunks_exact(8).map(|b| f64::read_le(b) as f32).collect(),
            "F16" => self.bytes.chunks_exact(2).map(|b| f16_to_f32(u16::from_le_bytes([b[0], b[1]]))).collect(),
            "BF16" => self.bytes.chunks_exact(2).map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16)).collect(),
            other => {
                return Err(ContainerError::Dtype { name: name.to_owned(), found: other.to_owned(), expected: "a float dtype".into() })
            }
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.shape), vals).expect("validated shape"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, RawTensor>,
}

fn digest(index: &BTreeMap<String, serde_json::Value>, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(index).expect("index serializes"));
    h.update(payload);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, a: &ArrayD<T>) {
        self.tensors.insert(name.into(), RawTensor::from_array(a));
    }

    pub fn get(&self, name: &str) -> Result<&RawTensor, ContainerError> {
        self.tensors.get(name).ok_or_else(|| ContainerError::Missing { name: name.to_owned() })
    }

    pub fn array<T: Real>(&self, name: &str) -> Result<ArrayD<T>, ContainerError> {
        self.get(name)?.to_array(name)
    }

    fn index_and_payload(&self) -> (BTreeMap<String, serde_json::Value>, Vec<u8>) {
        let mut index = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let start = payload.len();
            payload.extend_from_slice(&t.bytes);
            let e = IndexEntry { dtype: t.dtype.clone(), shape: t.shape.clone(), data_offsets: [start, payload.len()] };
            index.insert(name.clone(), serde_json::to_value(e).expect("entry serializes"));
        }
        if !self.metadata.is_empty() {
            index.insert(METADATA_KEY.to_owned(), serde_json::to_value(&self.metadata).expect("metadata serializes"));
        }
        (index, payload)
    }

    pub fn to_bytes(&self, with_checksum: bool) -> Vec<u8> {
        let (mut index, payload) = self.index_and_payload();
        if with_checksum {
            let mut meta = self.metadata.clone();
            meta.remove(CHECKSUM_KEY);
            let mut unsummed = index.clone();
            if meta.is_empty() {
                unsummed.remove(METADATA_KEY);
            } else {
                unsummed.insert(METADATA_KEY.to_owned(), serde_json::to_value(&meta).unwrap());
            }
            meta.insert(CHECKSUM_KEY.to_owned(), digest(&unsummed, &payload));
            index.insert(METADATA_KEY.to_owned(), serde_json::to_value(&meta).unwrap());
        }
        let mut header = serde_json::to_vec(&index).expect("index serializes");
        // pad the header to 8 bytes with spaces, as safetensors writers do
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path, with_checksum: bool) -> Result<(), ContainerError> {
        let bytes = self.to_bytes(with_checksum);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|source| ContainerError::Io { path: tmp.clone(), source })?;
        std::fs::rename(&tmp, path).map_err(|source| ContainerError::Io { path: path.to_owned(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io { path: path.to_owned(), source })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parse; a `checksum` metadata entry, when present, is verified.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ContainerError> {
        let bad = |reason: String| ContainerError::Malformed { path: path.to_owned(), reason };
        if bytes.len() < 8 {
            return Err(bad("shorter than the header length field".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if 8 + n > bytes.len() {
            return Err(bad(format!("header length {n} exceeds file size")));
        }
        let mut index: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| bad(format!("header is not a JSON object: {e}")))?;
        let payload = &bytes[8 + n..];
        let mut metadata: BTreeMap<String, String> = match index.get(METADATA_KEY) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(format!("metadata: {e}")))?,
            None => BTreeMap::new(),
        };
        if let Some(sum) = metadata.remove(CHECKSUM_KEY) {
            let mut unsummed = index.clone();
            if metadata.is_empty() {
                unsummed.remove(METADATA_KEY);
            } else {
                unsummed.insert(METADATA_KEY.to_owned(), serde_json::to_value(&metadata).unwrap());
            }
            if digest(&unsummed, payload) != sum {
                return Err(ContainerError::Checksum { path: path.to_owned() });
            }
        }
        index.remove(METADATA_KEY);
        let mut tensors = BTreeMap::new();
        for (name, v) in index {
            let e: IndexEntry = serde_json::from_value(v).map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
            let size = dtype_size(&e.dtype).ok_or_else(|| bad(format!("tensor {name:?}: unknown dtype {}", e.dtype)))?;
            let [a, b] = e.data_offsets;
            let numel: usize = e.shape.iter().product();
            if a > b || b > payload.len() || b - a != numel * size {
                return Err(bad(format!("tensor {name:?}: offsets {a}..{b} do not match shape {:?}", e.shape)));
            }
            tensors.insert(name, RawTensor { dtype: e.dtype, shape: e.shape, bytes: payload[a..b].to_vec() });
        }
        Ok(Self { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = Container::new();
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |d| (d[0] * 3 + d[1]) as f32 * 0.1);
        let b = ArrayD::from_shape_fn(IxDyn(&[4]), |d| std::f64::consts::PI * d[0] as f64);
        c.insert("a", &a);
        c.insert("b", &b);
        c.metadata.insert("k".into(), "v".into());
        let bytes = c.to_bytes(true);
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.array::<f32>("a").unwrap(), a);
        assert_eq!(back.array::<f64>("b").unwrap(), b);
        assert_eq!(back.metadata.get("k").map(String::as_str), Some("v"));
        assert!(matches!(back.array::<f64>("a"), Err(ContainerError::Dtype { .. })));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut c = Container::new();
        c.insert("w", &ArrayD::<f32>::ones(IxDyn(&[8])));
        let mut bytes = c.to_bytes(true);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(ContainerError::Checksum { .. })));
        // without a checksum the same bytes parse
        let plain = c.to_bytes(false);
        assert!(Container::from_bytes(&plain, Path::new("x")).is_ok());
    }

    #[test]
    fn half_precision_widening() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x3555), 0.33325195);
        let t = RawTensor { dtype: "BF16".into(), shape: vec![1], bytes: (0x3f80u16).to_le_bytes().to_vec() };
        assert_eq!(t.to_f32_lossy("t").unwrap()[[0]], 1.0);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let mut c = Container::new();
        c.insert("w", &ArrayD::<f32>::ones(IxDyn(&[8])));
        let bytes = c.to_bytes(false);
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")), Err(ContainerError::Malformed { .. })));
    }
}
