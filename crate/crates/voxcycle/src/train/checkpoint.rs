//! Checkpoint container: magic `VXCG`, a u32 version, then length-prefixed
//! named records (name, dtype tag, rank, dims, little-endian payload).
//!
//! Record order is fixed, so two checkpoints of identical training state are
//! byte-identical files.

use std::path::Path;

use thiserror::Error;

use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"VXCG";
pub const VERSION: u32 = 1;

const TAG_U64: u8 = 2;
const TAG_BYTES: u8 = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}, expected \"VXCG\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("unknown dtype tag {tag} in record {name}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("record {0} missing from checkpoint")]
    MissingRecord(String),
    #[error("record {name} has dtype {got:?}, expected {expected:?}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        got: String,
    },
    #[error("tensor {name} has shape {got:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RawRecord {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

/// Ordered collection of named records.
#[derive(Debug, Default)]
pub struct Records {
    entries: Vec<RawRecord>,
}

impl Records {
    pub fn new() -> Self {
        Records::default()
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        self.entries.push(RawRecord {
            name: name.into(),
            dtype: T::DTYPE.tag(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            payload,
        });
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(RawRecord {
            name: name.into(),
            dtype: TAG_U64,
            dims: vec![values.len() as u64],
            payload,
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.entries.push(RawRecord {
            name: name.into(),
            dtype: TAG_BYTES,
            dims: vec![bytes.len() as u64],
            payload: bytes.to_vec(),
        });
    }

    fn find(&self, name: &str) -> Result<&RawRecord, CheckpointError> {
        self.entries
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::MissingRecord(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|r| r.name.as_str())
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let rec = self.find(name)?;
        if rec.dtype != T::DTYPE.tag() {
            return Err(CheckpointError::DtypeMismatch {
                name: name.to_string(),
                expected: match T::DTYPE {
                    Dtype::F32 => "f32",
                    Dtype::F64 => "f64",
                },
                got: format!("tag {}", rec.dtype),
            });
        }
        let size = T::DTYPE.size_bytes();
        let shape: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
        let data: Vec<T> = rec
            .payload
            .chunks_exact(size)
            .map(|c| T::read_le(c))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }

    /// Dtype tag of a record without decoding it (used to dispatch on the
    /// checkpoint's training precision).
    pub fn dtype_tag(&self, name: &str) -> Result<u8, CheckpointError> {
        Ok(self.find(name)?.dtype)
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>, CheckpointError> {
        let rec = self.find(name)?;
        if rec.dtype != TAG_U64 {
            return Err(CheckpointError::DtypeMismatch {
                name: name.to_string(),
                expected: "u64",
                got: format!("tag {}", rec.dtype),
            });
        }
        Ok(rec
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64, CheckpointError> {
        let v = self.u64s(name)?;
        v.first()
            .copied()
            .ok_or_else(|| CheckpointError::MissingRecord(name.to_string()))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        let rec = self.find(name)?;
        if rec.dtype != TAG_BYTES {
            return Err(CheckpointError::DtypeMismatch {
                name: name.to_string(),
                expected: "bytes",
                got: format!("tag {}", rec.dtype),
            });
        }
        Ok(&rec.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for rec in &self.entries {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.push(rec.dtype);
            out.push(rec.dims.len() as u8);
            for &d in &rec.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&rec.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |have: bool, ctx: &str| {
            if have {
                Ok(())
            } else {
                Err(CheckpointError::Truncated {
                    context: ctx.to_string(),
                })
            }
        };
        need(bytes.len() >= 8, "header")?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut entries = Vec::new();
        let mut pos = 8usize;
        while pos < bytes.len() {
            need(bytes.len() >= pos + 4, "record name length")?;
            let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            need(bytes.len() >= pos + name_len, "record name")?;
            let name = String::from_utf8_lossy(&bytes[pos..pos + name_len]).into_owned();
            pos += name_len;
            need(bytes.len() >= pos + 2, "record dtype/rank")?;
            let dtype = bytes[pos];
            let rank = bytes[pos + 1] as usize;
            pos += 2;
            need(bytes.len() >= pos + 8 * rank, "record dims")?;
            let mut dims = Vec::with_capacity(rank);
            for i in 0..rank {
                dims.push(u64::from_le_bytes(
                    bytes[pos + 8 * i..pos + 8 * (i + 1)].try_into().unwrap(),
                ));
            }
            pos += 8 * rank;
            let elem = match dtype {
                0 => 4,
                1 => 8,
                TAG_U64 => 8,
                TAG_BYTES => 1,
                tag => return Err(CheckpointError::UnknownDtype { name, tag }),
            };
            let count = dims.iter().product::<u64>() as usize;
            let len = count * elem;
            need(bytes.len() >= pos + len, &format!("payload of {name}"))?;
            let payload = bytes[pos..pos + len].to_vec();
            pos += len;
            entries.push(RawRecord {
                name,
                dtype,
                dims,
                payload,
            });
        }
        Ok(Records { entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
