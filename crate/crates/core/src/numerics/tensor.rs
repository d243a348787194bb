//! FATN tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FATN" | u32 version = 1 | u8 dtype (0 = f64) | u32 ndim | ndim × u64 dims | payload
//! ```

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FATN";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// An n-dimensional f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let n: u64 = dims.iter().product();
        if n as usize != data.len() {
            return Err(Error::dim("Tensor::new", n as usize, data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len() as u64],
            data,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r as usize, *c as usize, self.data),
            _ => Err(Error::Format(format!(
                "expected a 2-d tensor, found {} dims",
                self.dims.len()
            ))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 1 + 4 + 8 * self.dims.len() + 8 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad FATN magic".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported FATN version {version}")));
        }
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported FATN dtype {dtype}")));
        }
        let ndim = u32::from_le_bytes(cur.array()?) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.array()?));
        }
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("FATN dims overflow".into()))? as usize;
        if bytes.len() - cur.pos != 8 * n {
            return Err(Error::Format(format!(
                "FATN payload holds {} bytes, dims need {}",
                bytes.len() - cur.pos,
                8 * n
            )));
        }
        let data = (0..n)
            .map(|_| cur.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated FATN file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }
}
