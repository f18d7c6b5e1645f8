//! SRST tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    b"SRST"
//! version  u32 = 1
//! rank     u32
//! dims     rank × u32
//! data     product(dims) × f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{Matrix, Scalar};

pub const MAGIC: &[u8; 4] = b"SRST";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "tensor dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|v| v.widen() as f32).collect(),
        }
    }

    pub fn vector(v: &[f32]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("magic", format!("expected SRST, found {magic:?}")));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(cur.u32(&format!("dim {i}"))? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dims", "element count overflows"))?;
        let payload = cur.take(numel.saturating_mul(4), "payload")?;
        if cur.pos != bytes.len() {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes", bytes.len() - cur.pos),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { location, message } => Error::Format {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    /// Views a rank-2 tensor as a matrix.
    pub fn into_matrix<T: Scalar>(self) -> Result<Matrix<T>> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.into_iter().map(|v| T::narrow(v as f64)).collect()),
            _ => Err(Error::Usage(format!("expected rank 2, got dims {:?}", self.dims))),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                what,
                format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
