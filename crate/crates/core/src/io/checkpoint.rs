//! Versioned binary checkpoints of trained networks.
//!
//! Layout, all integers little-endian: the 8-byte magic `ISTANASC`, a `u32`
//! format version, a `u64` length and that many bytes of JSON header
//! ([`CheckpointHeader`]), a `u64` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, `u64` rows, `u64` cols and row-major `f64` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::supernet::{Architecture, Network, NetworkConfig};

pub const MAGIC: &[u8; 8] = b"ISTANASC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    /// Architecture the parameters were trained for.
    pub architecture: Architecture,
    pub config_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
}

pub fn encode_checkpoint(header: &CheckpointHeader, net: &Network) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let tensors = net.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, m) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Schema {
                field: what.to_string(),
                message: format!("truncated at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Schema {
            field: what.to_string(),
            message: format!("{v} does not fit in memory"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Schema {
            field: "magic".into(),
            message: "not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Schema {
            field: "version".into(),
            message: format!("unsupported version {version}"),
        });
    }
    let len = r.u64("header")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)?;
    let count = r.u64("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Schema {
                field: "tensor name".into(),
                message: "not UTF-8".into(),
            })?
            .to_string();
        let rows = r.u64(&name)?;
        let cols = r.u64(&name)?;
        let n = rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).ok_or_else(|| Error::Schema {
            field: name.clone(),
            message: "shape overflows".into(),
        })?;
        let data = r
            .take(n, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Schema {
            field: "trailer".into(),
            message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    let mut network = Network::new(header.network.clone(), 0)?;
    network.load_named_tensors(&tensors)?;
    Ok(Checkpoint { header, network })
}

pub fn write_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, net: &Network) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(header, net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
