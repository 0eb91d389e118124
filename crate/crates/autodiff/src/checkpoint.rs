//! Single-file checkpoints.
//!
//! Layout: 8-byte magic `TMOECKPT`, little-endian `u64` header length `H`,
//! `H` bytes of UTF-8 JSON ([`CheckpointHeader`]), then the blob of
//! little-endian `f64` values. Entry offsets are in bytes from the start
//! of the blob.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TMOECKPT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointEntry>,
}

pub fn write_checkpoint(path: &Path, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in store.entries() {
        params.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: t.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: 1,
        meta,
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&blob)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let blob = &bytes[16 + hlen..];
    let mut out = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob out of range", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header, out))
}
