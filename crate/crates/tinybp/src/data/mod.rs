//! Dataset handling: NDJSON record IO, resampling and windowing, per-subject
//! splits, a synthetic generator for pipeline tests, and a binary window
//! cache. All signals are `[channel-free]` 1-D sample vectors; the model
//! layer adds the channel axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod cache;
pub mod ndjson;
pub mod prep;
pub mod split;
pub mod synth;

pub use prep::{build_windows, extract_labels, mae, resample_linear, WindowSet};

/// Practical caps on record contents so untrusted files cannot drive
/// downstream arithmetic into overflow.
pub const MAX_SIGNAL_LEN: usize = 1 << 24;
pub const MAX_FS_HZ: f64 = 100_000.0;

/// One subject recording segment: a PPG signal with either an aligned ABP
/// signal, scalar pressure labels, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub fs_hz: f64,
    pub ppg: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abp: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbp: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbp: Option<f32>,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() || self.subject_id.len() > 256 {
            return Err(Error::Parse("subject_id empty or unreasonably long".into()));
        }
        if !(self.fs_hz > 0.0) || self.fs_hz > MAX_FS_HZ {
            return Err(Error::Parse(format!("bad sampling rate {}", self.fs_hz)));
        }
        if self.ppg.is_empty() || self.ppg.len() > MAX_SIGNAL_LEN {
            return Err(Error::Parse(format!("bad ppg length {}", self.ppg.len())));
        }
        if self.ppg.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite ppg sample".into()));
        }
        if let Some(abp) = &self.abp {
            if abp.len() != self.ppg.len() {
                return Err(Error::Parse(format!(
                    "abp length {} does not match ppg length {}",
                    abp.len(),
                    self.ppg.len()
                )));
            }
            if abp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse("non-finite abp sample".into()));
            }
        }
        for (name, v) in [("sbp", self.sbp), ("dbp", self.dbp)] {
            if let Some(v) = v {
                if !v.is_finite() || !(0.0..=400.0).contains(&v) {
                    return Err(Error::Parse(format!("{name} label {v} out of range")));
                }
            }
        }
        if let (Some(s), Some(d)) = (self.sbp, self.dbp) {
            if s <= d {
                return Err(Error::Parse(format!("sbp {s} must exceed dbp {d}")));
            }
        }
        Ok(())
    }

    /// True if the record can supply training targets of any kind.
    pub fn has_labels(&self) -> bool {
        self.abp.is_some() || (self.sbp.is_some() && self.dbp.is_some())
    }
}
