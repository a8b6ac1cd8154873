//! Binary matrix files.
//!
//! Layout, all little-endian: `m: u64`, `n: u64`, `seed: u64`, then `m · n`
//! `f64` entries in row-major order. Matrices not drawn from a seed store 0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const HEADER: usize = 24;

pub fn encode_matrix(a: &Matrix, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * a.as_slice().len());
    out.extend_from_slice(&(a.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(a.cols() as u64).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for v in a.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(Matrix, u64)> {
    if bytes.len() < HEADER {
        return Err(Error::Parse {
            line: 0,
            message: format!("matrix file has {} bytes, header needs {HEADER}", bytes.len()),
        });
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
    let (m, n, seed) = (word(0), word(1), word(2));
    let count = m
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("matrix shape {m}x{n} is too large"),
        })?;
    let body = &bytes[HEADER..];
    if body.len() != count {
        return Err(Error::Parse {
            line: 0,
            message: format!("{m}x{n} matrix needs {count} data bytes, found {}", body.len()),
        });
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Matrix::from_vec(m as usize, n as usize, data)?, seed))
}

pub fn write_matrix(path: impl AsRef<Path>, a: &Matrix, seed: u64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_matrix(a, seed)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(Matrix, u64)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}
