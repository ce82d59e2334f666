//! `PBT1` tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"PBT1" | rank: u8 | dims: rank x u64 | payload: Π dims x f64 (row-major)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use featborrow::{Error, FeatureMap, Matrix, Result};

pub const MAGIC: &[u8; 4] = b"PBT1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Format {
                detail: format!("tensor rank {} outside 1..=255", dims.len()),
            });
        }
        let len = element_count(&dims)?;
        if len != data.len() as u64 {
            return Err(Error::Format {
                detail: format!("dims {dims:?} need {len} values, got {}", data.len()),
            });
        }
        Ok(TensorFile { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format {
            detail: "truncated tensor file".to_string(),
        };
        if bytes.len() < 5 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format {
                detail: format!("bad magic {:?}, expected \"PBT1\"", &bytes[..4]),
            });
        }
        let rank = bytes[4] as usize;
        if rank == 0 {
            return Err(Error::Format {
                detail: "tensor rank 0".to_string(),
            });
        }
        let header = 5 + 8 * rank;
        if bytes.len() < header {
            return Err(truncated());
        }
        let dims: Vec<u64> = bytes[5..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let len = element_count(&dims)?;
        let payload = &bytes[header..];
        if payload.len() as u64 != len.saturating_mul(8) {
            return Err(Error::Format {
                detail: format!(
                    "payload is {} bytes, dims {dims:?} need {}",
                    payload.len(),
                    len.saturating_mul(8)
                ),
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(TensorFile { dims, data })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format {
            detail: e.to_string(),
        })?;
        TensorFile::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        TensorFile::decode(&bytes)
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            detail: format!("dims {dims:?} overflow"),
        })
}

impl From<&FeatureMap> for TensorFile {
    fn from(m: &FeatureMap) -> Self {
        TensorFile {
            dims: vec![m.h() as u64, m.w() as u64, m.c() as u64],
            data: m.data().to_vec(),
        }
    }
}

impl From<&Matrix> for TensorFile {
    fn from(m: &Matrix) -> Self {
        TensorFile {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        }
    }
}

impl TryFrom<TensorFile> for FeatureMap {
    type Error = Error;

    fn try_from(t: TensorFile) -> Result<Self> {
        match t.dims[..] {
            [h, w, c] => FeatureMap::from_vec(h as usize, w as usize, c as usize, t.data),
            _ => Err(Error::Format {
                detail: format!("feature map needs rank 3, got {}", t.rank()),
            }),
        }
    }
}

impl TryFrom<TensorFile> for Matrix {
    type Error = Error;

    fn try_from(t: TensorFile) -> Result<Self> {
        match t.dims[..] {
            [r, c] => Matrix::from_vec(r as usize, c as usize, t.data),
            _ => Err(Error::Format {
                detail: format!("matrix needs rank 2, got {}", t.rank()),
            }),
        }
    }
}
