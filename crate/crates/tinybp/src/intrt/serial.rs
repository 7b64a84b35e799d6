//! Int8 model container: one self-describing binary file holding a full
//! [`IntGraph`].
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TBPI" | version u32 | json_len u64 | manifest JSON
//! | weight_bytes u64 | i8 weight blob | bias_bytes u64 | i32 bias blob
//! ```
//!
//! The manifest is the graph description without the blobs. Blob sizes are
//! implied by the layers, so `parse_int_graph` validates the manifest
//! first, then demands the declared blob lengths match exactly before any
//! allocation. Untrusted input cannot make it allocate more than the file
//! itself contains.

use crate::error::{Error, Result};
use crate::wire::Reader;

use super::IntGraph;

pub const MAGIC: &[u8; 4] = b"TBPI";
pub const VERSION: u32 = 1;
pub const MAX_JSON_BYTES: u64 = 64 << 20;

pub fn write_int_graph(g: &IntGraph) -> Result<Vec<u8>> {
    g.validate()?;
    let json = serde_json::to_vec(g)?;
    let mut out = Vec::with_capacity(json.len() + g.weights.len() + 4 * g.biases.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(g.weights.len() as u64).to_le_bytes());
    out.extend(g.weights.iter().map(|&w| w as u8));
    out.extend_from_slice(&(4 * g.biases.len() as u64).to_le_bytes());
    for &b in &g.biases {
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_int_graph(bytes: &[u8]) -> Result<IntGraph> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported int container version {version}")));
    }
    let json_len = r.u64_le()?;
    if json_len > MAX_JSON_BYTES {
        return Err(Error::Parse(format!("manifest length {json_len} exceeds {MAX_JSON_BYTES}")));
    }
    let json = r.take(json_len as usize)?;
    let mut g: IntGraph = serde_json::from_slice(json)?;
    let (_, w_total, b_total) = g.check_structure()?;

    let w_bytes = r.u64_le()?;
    if w_bytes != w_total as u64 {
        return Err(Error::Parse(format!(
            "weight blob is {w_bytes} bytes but the layers need {w_total}"
        )));
    }
    g.weights = r.take(w_total)?.iter().map(|&b| b as i8).collect();

    let b_bytes = r.u64_le()?;
    if b_bytes != 4 * b_total as u64 {
        return Err(Error::Parse(format!(
            "bias blob is {b_bytes} bytes but the layers need {}",
            4 * b_total
        )));
    }
    g.biases = r
        .take(4 * b_total)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    r.finish()?;

    // Bias magnitudes come from the blob, so the overflow bound needs a
    // second pass.
    g.validate()?;
    Ok(g)
}
