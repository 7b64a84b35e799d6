//! Resampling, windowing, normalization, and evaluation metrics.

use super::Record;
use crate::error::{Error, Result};

/// Default sampling rate that windows are cut at, in Hz.
pub const TARGET_FS_HZ: f64 = 125.0;
const SIGMA_FLOOR: f64 = 1e-6;

/// Linear-interpolation resampling. The output length is
/// `round(len * fs_out / fs_in)` (half away from zero); output sample `i`
/// reads input position `i * fs_in / fs_out`, clamped to the signal.
pub fn resample_linear(x: &[f32], fs_in: f64, fs_out: f64) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Invalid("cannot resample an empty signal".into()));
    }
    if !(fs_in > 0.0) || !(fs_out > 0.0) {
        return Err(Error::Invalid("sampling rates must be positive".into()));
    }
    let out_len = (x.len() as f64 * fs_out / fs_in).round() as usize;
    if out_len == 0 {
        return Err(Error::Invalid(format!(
            "resampling {} samples from {fs_in} Hz to {fs_out} Hz leaves nothing",
            x.len()
        )));
    }
    let step = fs_in / fs_out;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = (i as f64 * step).min((x.len() - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(x.len() - 1);
        let frac = pos - lo as f64;
        out.push((x[lo] as f64 * (1.0 - frac) + x[hi] as f64 * frac) as f32);
    }
    Ok(out)
}

/// In-place z-score with a floored standard deviation so constant windows
/// stay finite. Population (biased) variance.
pub fn zscore(x: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt().max(SIGMA_FLOOR);
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) / sigma) as f32;
    }
}

/// Systolic and diastolic pressure of one ABP window: its max and min.
pub fn extract_labels(abp: &[f32]) -> (f32, f32) {
    let mut max = f32::NEG_INFINITY;
    let mut min = f32::INFINITY;
    for &v in abp {
        max = max.max(v);
        min = min.min(v);
    }
    (max, min)
}

/// Fixed-length windows cut from every record, with per-window z-scored PPG
/// and labels. Raw ABP windows are kept only if every record has ABP.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub window_len: usize,
    /// PPG windows, row-major `[n, window_len]`, z-scored per window.
    pub x: Vec<f32>,
    pub sbp: Vec<f32>,
    pub dbp: Vec<f32>,
    /// Raw ABP windows `[n, window_len]` in mmHg, when available.
    pub abp: Option<Vec<f32>>,
    /// Distinct subject ids, in first-seen order.
    pub subjects: Vec<String>,
    /// Index into `subjects` per window.
    pub subject_of: Vec<u32>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.subject_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_of.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        &self.x[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn abp_window(&self, i: usize) -> Option<&[f32]> {
        self.abp
            .as_ref()
            .map(|a| &a[i * self.window_len..(i + 1) * self.window_len])
    }

    pub fn subject_name(&self, i: usize) -> &str {
        &self.subjects[self.subject_of[i] as usize]
    }
}

/// Cut `seconds`-long windows every `stride` samples at [`TARGET_FS_HZ`].
///
/// Records at other rates are resampled first. The window length is
/// `round(seconds * 125)`. Labels come from the ABP window extremes when the
/// record has ABP, otherwise from its scalar labels; a record with neither
/// is an error. Records shorter than one window are skipped with a warning;
/// the warnings are returned alongside the set.
pub fn build_windows(
    records: &[Record],
    seconds: f64,
    stride: usize,
) -> Result<(WindowSet, Vec<String>)> {
    if !(seconds > 0.0) {
        return Err(Error::Invalid("window seconds must be positive".into()));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be at least one sample".into()));
    }
    let window_len = (seconds * TARGET_FS_HZ).round() as usize;
    if window_len == 0 {
        return Err(Error::Invalid(format!("window of {seconds}s has no samples")));
    }
    let keep_abp = records.iter().all(|r| r.abp.is_some());

    let mut ws = WindowSet {
        window_len,
        x: Vec::new(),
        sbp: Vec::new(),
        dbp: Vec::new(),
        abp: keep_abp.then(Vec::new),
        subjects: Vec::new(),
        subject_of: Vec::new(),
    };
    let mut warnings = Vec::new();

    for rec in records {
        rec.validate()?;
        if !rec.has_labels() {
            return Err(Error::Invalid(format!(
                "record for subject {} has neither abp nor sbp/dbp labels",
                rec.subject_id
            )));
        }
        let ppg;
        let abp;
        if (rec.fs_hz - TARGET_FS_HZ).abs() < 1e-9 {
            ppg = rec.ppg.clone();
            abp = rec.abp.clone();
        } else {
            ppg = resample_linear(&rec.ppg, rec.fs_hz, TARGET_FS_HZ)?;
            abp = match &rec.abp {
                Some(a) => Some(resample_linear(a, rec.fs_hz, TARGET_FS_HZ)?),
                None => None,
            };
        }
        if ppg.len() < window_len {
            warnings.push(format!(
                "subject {}: record of {} samples is shorter than one {window_len}-sample \
                 window, skipped",
                rec.subject_id,
                ppg.len()
            ));
            continue;
        }
        let subj_idx = match ws.subjects.iter().position(|s| s == &rec.subject_id) {
            Some(i) => i as u32,
            None => {
                ws.subjects.push(rec.subject_id.clone());
                (ws.subjects.len() - 1) as u32
            }
        };
        let mut start = 0;
        while start + window_len <= ppg.len() {
            let mut w = ppg[start..start + window_len].to_vec();
            zscore(&mut w);
            ws.x.extend_from_slice(&w);
            let (sbp, dbp) = match &abp {
                Some(a) => extract_labels(&a[start..start + window_len]),
                None => (rec.sbp.unwrap(), rec.dbp.unwrap()),
            };
            ws.sbp.push(sbp);
            ws.dbp.push(dbp);
            if let (Some(dst), Some(a)) = (ws.abp.as_mut(), &abp) {
                dst.extend_from_slice(&a[start..start + window_len]);
            }
            ws.subject_of.push(subj_idx);
            start += stride;
        }
    }
    Ok((ws, warnings))
}

/// Mean absolute error, streaming in f64.
pub fn mae(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "mae needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}
