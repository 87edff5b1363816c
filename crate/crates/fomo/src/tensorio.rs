//! The `.fomo` tensor file: a fixed little-endian header followed by a
//! row-major float32 payload.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "FOMO"
//! 4       4         dtype code, u32 LE (0 = float32)
//! 8       4         ndim, u32 LE (1 or 2)
//! 12      8 * ndim  extents, u64 LE, each >= 1
//! ...     4 * prod  payload, f32 LE
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fomo_core::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"FOMO";
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?} (expected \"FOMO\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dtype code {code} (only 0 = float32)")]
    DtypeMismatch { code: u32 },
    #[error("rank {ndim} is not 1 or 2")]
    BadRank { ndim: u32 },
    #[error("zero extent in dims {dims:?}")]
    ZeroDim { dims: Vec<u64> },
    #[error("size mismatch: header implies {expected} bytes, file has {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{}: {source}", path.display())]
    In {
        path: PathBuf,
        #[source]
        source: Box<TensorError>,
    },
}

impl TensorError {
    /// The underlying error, without the file-path wrapper.
    pub fn root(&self) -> &TensorError {
        match self {
            TensorError::In { source, .. } => source.root(),
            other => other,
        }
    }

    fn at(self, path: &Path) -> Self {
        TensorError::In {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

/// A float32 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(TensorError::BadRank {
                ndim: dims.len() as u32,
            });
        }
        if dims.contains(&0) {
            return Err(TensorError::ZeroDim {
                dims: dims.iter().map(|&d| d as u64).collect(),
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::SizeMismatch {
                expected: 4 * n as u64,
                found: 4 * data.len() as u64,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    /// Narrows `m` to float32; values that overflow are rejected.
    pub fn from_matrix(m: &Matrix) -> Result<Self, TensorError> {
        Self::new(vec![m.rows(), m.cols()], narrow(m.as_slice())?)
    }

    pub fn from_vector(v: &[f64]) -> Result<Self, TensorError> {
        Self::new(vec![v.len()], narrow(v)?)
    }

    /// Rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.dims[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("rank checked at construction"),
        };
        Matrix::from_vec(r, c, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("extents match payload")
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Trailing extent.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let too_short = |need: usize| TensorError::SizeMismatch {
            expected: need as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(too_short(12));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(TensorError::BadMagic { found });
        }
        if bytes.len() < 12 {
            return Err(too_short(12));
        }
        let code = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if code != DTYPE_F32 {
            return Err(TensorError::DtypeMismatch { code });
        }
        let ndim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if ndim == 0 || ndim > 2 {
            return Err(TensorError::BadRank { ndim });
        }
        let header = 12 + 8 * ndim as usize;
        if bytes.len() < header {
            return Err(too_short(header));
        }
        let dims: Vec<u64> = bytes[12..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if dims.contains(&0) {
            return Err(TensorError::ZeroDim { dims });
        }
        let expected = dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .and_then(|p| p.checked_add(header as u64))
            .unwrap_or(u64::MAX);
        if expected != bytes.len() as u64 {
            return Err(TensorError::SizeMismatch {
                expected,
                found: bytes.len() as u64,
            });
        }
        let data: Vec<f32> = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(dims.iter().map(|&d| d as usize).collect(), data)
    }
}

fn narrow(v: &[f64]) -> Result<Vec<f32>, TensorError> {
    v.iter()
        .enumerate()
        .map(|(index, &x)| {
            let y = x as f32;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(TensorError::NonFinite { index })
            }
        })
        .collect()
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), TensorError> {
    fs::write(path, tensor.encode()).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), TensorError> {
    write_tensor(path, &Tensor::from_matrix(m).map_err(|e| e.at(path))?)
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<(), TensorError> {
    write_tensor(path, &Tensor::from_vector(v).map_err(|e| e.at(path))?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::decode(&bytes).map_err(|e| e.at(path))
}

pub fn read_matrix(path: &Path) -> Result<Matrix, TensorError> {
    Ok(read_tensor(path)?.to_matrix())
}
