//! Flat binary array files: `rank: u64`, `rank` extents as `u64`, then the
//! row-major `f64` payload, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut words = bytes.chunks_exact(8);
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Data(
            "array file length is not a multiple of 8".into(),
        ));
    }
    let mut next = || -> Result<[u8; 8]> {
        words
            .next()
            .map(|w| w.try_into().expect("chunk of 8"))
            .ok_or_else(|| Error::Data("truncated array file".into()))
    };
    let rank = u64::from_le_bytes(next()?) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Data(format!("implausible array rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(next()?) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data("array extents overflow".into()))?;
    let payload = bytes.len() / 8 - 1 - rank;
    if payload != numel {
        return Err(Error::Data(format!(
            "array payload has {payload} values, shape {shape:?} needs {numel}"
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f64::from_le_bytes(next()?));
    }
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
