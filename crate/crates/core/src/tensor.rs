//! Binary tensor files.
//!
//! Layout (all little-endian): `u32 rank`, `rank` x `u32` dimensions, then
//! the elements as `f32` in row-major order.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (1 + self.dims.len() + self.data.len()));
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
        let mut words = bytes.chunks_exact(4);
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::ShapeMismatch(format!(
                "tensor byte length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let mut next_u32 = || {
            words
                .next()
                .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        };
        let rank =
            next_u32().ok_or_else(|| Error::ShapeMismatch("empty tensor file".into()))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d =
                next_u32().ok_or_else(|| Error::ShapeMismatch("truncated tensor header".into()))?;
            dims.push(d as usize);
        }
        let header = 4 * (1 + rank);
        let data: Vec<f32> = bytes[header..]
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
