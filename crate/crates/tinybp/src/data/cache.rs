//! Binary cache for prepared window sets, so expensive windowing of large
//! NDJSON inputs runs once.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "TBPW" | version u32 | json_len u64 | header JSON
//! | subject_of u32*n | x f32*(n*len) | sbp f32*n | dbp f32*n
//! | [abp f32*(n*len) if has_abp]
//! ```
//!
//! `parse_cache` accepts untrusted bytes: declared counts are bounds-checked
//! against the real input before any allocation happens.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prep::WindowSet;
use crate::error::{Error, Result};
use crate::wire::{extend_f32s_le, f32s_from_le, Reader};

pub const MAGIC: &[u8; 4] = b"TBPW";
pub const VERSION: u32 = 1;
pub const MAX_JSON_BYTES: u64 = 64 << 20;
const MAX_WINDOWS: u64 = 1 << 24;
const MAX_WINDOW_LEN: u64 = 1 << 20;
const MAX_TOTAL_SAMPLES: u64 = 1 << 26;

#[derive(Serialize, Deserialize)]
struct Header {
    window_len: u64,
    n: u64,
    has_abp: bool,
    subjects: Vec<String>,
}

pub fn write_cache(ws: &WindowSet) -> Result<Vec<u8>> {
    let n = ws.len() as u64;
    let header = serde_json::to_vec(&Header {
        window_len: ws.window_len as u64,
        n,
        has_abp: ws.abp.is_some(),
        subjects: ws.subjects.clone(),
    })?;
    if header.len() as u64 > MAX_JSON_BYTES
        || n > MAX_WINDOWS
        || ws.window_len as u64 > MAX_WINDOW_LEN
        || n * ws.window_len as u64 > MAX_TOTAL_SAMPLES
    {
        return Err(Error::Invalid("window set exceeds cache limits".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &s in &ws.subject_of {
        out.extend_from_slice(&s.to_le_bytes());
    }
    extend_f32s_le(&mut out, &ws.x);
    extend_f32s_le(&mut out, &ws.sbp);
    extend_f32s_le(&mut out, &ws.dbp);
    if let Some(abp) = &ws.abp {
        extend_f32s_le(&mut out, abp);
    }
    Ok(out)
}

pub fn parse_cache(bytes: &[u8]) -> Result<WindowSet> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported cache version {version}")));
    }
    let json_len = r.u64_le()?;
    if json_len > MAX_JSON_BYTES {
        return Err(Error::Parse("cache header too large".into()));
    }
    let header: Header = serde_json::from_slice(r.take(json_len as usize)?)?;
    if header.window_len == 0
        || header.window_len > MAX_WINDOW_LEN
        || header.n > MAX_WINDOWS
        || header.n * header.window_len > MAX_TOTAL_SAMPLES
    {
        return Err(Error::Parse(format!(
            "implausible cache geometry: {} windows of {}",
            header.n, header.window_len
        )));
    }
    let n = header.n as usize;
    if header.subjects.len() > n.max(1) {
        return Err(Error::Parse("more subjects than windows".into()));
    }
    let distinct: HashSet<&String> = header.subjects.iter().collect();
    if distinct.len() != header.subjects.len() {
        return Err(Error::Parse("duplicate subject names".into()));
    }

    let total = (header.n * header.window_len) as usize;
    let subject_of: Vec<u32> = r
        .take(4 * n)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = subject_of
        .iter()
        .find(|&&s| s as usize >= header.subjects.len())
    {
        return Err(Error::Parse(format!("subject index {bad} out of range")));
    }
    let x = f32s_from_le(r.take(4 * total)?);
    let sbp = f32s_from_le(r.take(4 * n)?);
    let dbp = f32s_from_le(r.take(4 * n)?);
    let abp = if header.has_abp {
        Some(f32s_from_le(r.take(4 * total)?))
    } else {
        None
    };
    r.finish()?;
    Ok(WindowSet {
        window_len: header.window_len as usize,
        x,
        sbp,
        dbp,
        abp,
        subjects: header.subjects,
        subject_of,
    })
}

pub fn save_cache(path: impl AsRef<Path>, ws: &WindowSet) -> Result<()> {
    Ok(fs::write(path, write_cache(ws)?)?)
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<WindowSet> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prep::build_windows;
    use crate::data::synth::{generate, SynthConfig};

    fn sample_set(scalar_only: bool) -> WindowSet {
        let recs = generate(&SynthConfig {
            n_subjects: 3,
            seconds: 12.0,
            seed: 5,
            scalar_only,
            ..SynthConfig::default()
        })
        .unwrap();
        build_windows(&recs, 5.0, 313).unwrap().0
    }

    #[test]
    fn roundtrip_with_and_without_abp() {
        for scalar_only in [false, true] {
            let ws = sample_set(scalar_only);
            assert!(!ws.is_empty());
            let bytes = write_cache(&ws).unwrap();
            let back = parse_cache(&bytes).unwrap();
            assert_eq!(back, ws);
        }
    }

    #[test]
    fn rejects_any_truncation() {
        let bytes = write_cache(&sample_set(false)).unwrap();
        for cut in [0, 4, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(parse_cache(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extended = bytes.clone();
        extended.push(7);
        assert!(parse_cache(&extended).is_err());
    }

    #[test]
    fn rejects_out_of_range_subject_index() {
        let mut ws = sample_set(true);
        ws.subject_of[0] = 99;
        let bytes = write_cache(&ws).unwrap();
        assert!(parse_cache(&bytes).is_err());
    }

    #[test]
    fn rejects_absurd_geometry() {
        let header = serde_json::to_vec(&Header {
            window_len: MAX_WINDOW_LEN + 1,
            n: 1,
            has_abp: false,
            subjects: vec!["a".into()],
        })
        .unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        assert!(parse_cache(&bytes).is_err());
    }
}
