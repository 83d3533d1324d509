//! Binary array container shared by episode files and checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes      e.g. "CWEP0001" or "CWCK0001"
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON:
//!              {"arrays": [{"name", "dtype", "shape", "byte_offset"}, ...],
//!               "payload_len": n, "meta": {...}}
//! payload      n bytes, little-endian arrays at their byte_offset
//! crc32        u32 LE, CRC-32 (IEEE) of the payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &[u8; 8] = b"CWEP0001";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CWCK0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayEntry>,
    payload_len: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        self.arrays.push(NamedArray { name, shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format(name, "array missing"))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            _ => Err(Error::format(name, "expected f64 array")),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U8(v) => Ok((&a.shape, v)),
            _ => Err(Error::format(name, "expected u8 array")),
        }
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                byte_offset: payload.len() as u64,
            });
            match &a.data {
                ArrayData::U8(v) => payload.extend_from_slice(v),
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let header = Header {
            arrays: entries,
            payload_len: payload.len() as u64,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != magic {
            return Err(Error::format(
                "magic",
                format!("expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("header_len", "exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::format("header", e.to_string()))?;
        let payload_len = header.payload_len as usize;
        if bytes.len() != header_end + payload_len + 4 {
            return Err(Error::format(
                "payload_len",
                format!(
                    "header declares {payload_len} payload bytes, file holds {}",
                    bytes.len().saturating_sub(header_end + 4)
                ),
            ));
        }
        let payload = &bytes[header_end..header_end + payload_len];
        let stored = u32::from_le_bytes(bytes[header_end + payload_len..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::format("crc32", "checksum mismatch"));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let count: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let end = start + count * e.dtype.width();
            if end > payload.len() {
                return Err(Error::format(
                    format!("arrays.{}", e.name),
                    "extends past payload",
                ));
            }
            let raw = &payload[start..end];
            let data = match e.dtype {
                DType::U8 => ArrayData::U8(raw.to_vec()),
                DType::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        fs::write(path, self.to_bytes(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}
