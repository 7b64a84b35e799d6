//! Checkpoint container: graph structure plus named f32 tensors in one
//! self-describing binary file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TBPG" | version u32 | json_len u64 | manifest JSON
//! | blob_len u64 | f32 blob
//! ```
//!
//! The manifest holds the graph and a tensor directory of
//! `{name, shape, offset, len}` with offsets in f32 elements into the blob.
//! `parse_checkpoint` accepts untrusted bytes: every length is checked
//! against the actual input before any allocation, entries must be
//! non-overlapping and in order, and the embedded graph must validate.

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::wire::{extend_f32s_le, f32s_from_le, Reader};

pub const MAGIC: &[u8; 4] = b"TBPG";
pub const VERSION: u32 = 1;
pub const MAX_JSON_BYTES: u64 = 64 << 20;
pub const MAX_BLOB_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: Graph,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    graph: Graph,
    tensors: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

pub fn write_checkpoint(graph: &Graph, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    graph.validate()?;
    let mut dir = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let elems: usize = t.shape.iter().product();
        if elems != t.data.len() {
            return Err(Error::Invalid(format!(
                "tensor {}: shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        dir.push(DirEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len() as u64,
        });
        offset += t.data.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        graph: graph.clone(),
        tensors: dir,
    })?;
    let blob_len = 4 * offset;
    if manifest.len() as u64 > MAX_JSON_BYTES || blob_len > MAX_BLOB_BYTES {
        return Err(Error::Invalid("checkpoint exceeds container limits".into()));
    }

    let mut out = Vec::with_capacity(28 + manifest.len() + blob_len as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob_len.to_le_bytes());
    for t in tensors {
        extend_f32s_le(&mut out, &t.data);
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u64_le()?;
    if json_len > MAX_JSON_BYTES {
        return Err(Error::Parse(format!("manifest of {json_len} bytes exceeds limit")));
    }
    let manifest: Manifest = serde_json::from_slice(r.take(json_len as usize)?)?;
    let blob_len = r.u64_le()?;
    if blob_len > MAX_BLOB_BYTES || blob_len % 4 != 0 {
        return Err(Error::Parse(format!("bad blob length {blob_len}")));
    }
    let blob = r.take(blob_len as usize)?;
    r.finish()?;

    manifest.graph.validate()?;
    let blob_elems = blob_len / 4;
    let mut tensors = Vec::with_capacity(manifest.tensors.len().min(1024));
    let mut next_free = 0u64;
    for e in &manifest.tensors {
        let elems = e
            .shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .filter(|&n| n == e.len)
            .ok_or_else(|| {
                Error::Parse(format!("tensor {}: shape does not match len", e.name))
            })?;
        let end = e
            .offset
            .checked_add(elems)
            .filter(|&end| end <= blob_elems && e.offset >= next_free)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "tensor {}: range {}..{:?} is out of order or out of bounds",
                    e.name,
                    e.offset,
                    e.offset.checked_add(elems)
                ))
            })?;
        next_free = end;
        let lo = 4 * e.offset as usize;
        let hi = 4 * end as usize;
        tensors.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: f32s_from_le(&blob[lo..hi]),
        });
    }
    Ok(Checkpoint {
        graph: manifest.graph,
        tensors,
    })
}
