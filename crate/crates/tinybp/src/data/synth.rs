//! Synthetic PPG/ABP generator for pipeline tests and demos. Signals are
//! crude physiologically-shaped pulses, not simulations; what matters is
//! that (a) the ABP extremes equal the labels exactly, and (b) the PPG
//! morphology deterministically encodes both labels, so a small network can
//! actually learn the mapping.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::prep::TARGET_FS_HZ;
use super::Record;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Length of each subject's record in seconds.
    pub seconds: f64,
    pub seed: u64,
    /// Uniform noise amplitude added to the PPG.
    pub noise: f64,
    /// Drop the ABP waveform, keeping only scalar labels.
    pub scalar_only: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 12,
            seconds: 60.0,
            seed: 0,
            noise: 0.02,
            scalar_only: false,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Record>> {
    if cfg.n_subjects == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::Invalid("need at least one subject and positive duration".into()));
    }
    let n_samples = (cfg.seconds * TARGET_FS_HZ).round() as usize;
    if n_samples == 0 {
        return Err(Error::Invalid("duration too short for one sample".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_subjects);
    for subj in 0..cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let sbp = (rng.random_range(100.0..180.0f64) * 10.0).round() as f32 / 10.0;
        let dbp_hi = (sbp - 30.0).min(110.0);
        let dbp = (rng.random_range(50.0..dbp_hi as f64) * 10.0).round() as f32 / 10.0;

        let period = rng.random_range(75..=150usize);
        // Label-dependent morphology: systolic peak timing follows SBP,
        // dicrotic notch depth follows DBP.
        let peak_phase = 0.15 + 0.25 * ((sbp - 100.0) / 80.0) as f64;
        let notch_depth = 0.2 + 0.6 * ((dbp - 50.0) / 60.0) as f64;
        let notch_phase = peak_phase + 0.3;

        let mut ppg = Vec::with_capacity(n_samples);
        let mut abp = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let in_beat = i % period;
            let peak_idx = (peak_phase * period as f64).round() as usize;
            // Pressure rises half-cosine to the peak and falls after it, so
            // every beat touches dbp at sample 0 and sbp at the peak sample.
            // Compute the phase ratio before multiplying by pi so the peak
            // sample sees exactly cos(pi) = -1 and sample 0 exactly cos(0).
            let p = if in_beat <= peak_idx {
                if peak_idx == 0 {
                    1.0
                } else {
                    let r = in_beat as f64 / peak_idx as f64;
                    0.5 - 0.5 * (r * std::f64::consts::PI).cos()
                }
            } else {
                let r = (in_beat - peak_idx) as f64 / (period - peak_idx) as f64;
                0.5 + 0.5 * (r * std::f64::consts::PI).cos()
            } as f32;
            // Clamp so f32 rounding of the blend can never overshoot a label.
            abp.push((dbp * (1.0 - p) + sbp * p).clamp(dbp, sbp));

            let phase = in_beat as f64 / period as f64;
            let pulse = gauss(phase, peak_phase, 0.07)
                + notch_depth * gauss(phase, notch_phase, 0.05);
            let wander = 0.1 * (i as f64 / (TARGET_FS_HZ * 7.0) * std::f64::consts::TAU).sin();
            let noise = cfg.noise * (rng.random::<f64>() - 0.5) * 2.0;
            ppg.push((pulse + wander + noise) as f32);
        }

        out.push(Record {
            subject_id: format!("synth{subj:04}"),
            fs_hz: TARGET_FS_HZ,
            ppg,
            abp: (!cfg.scalar_only).then_some(abp),
            sbp: Some(sbp),
            dbp: Some(dbp),
        });
    }
    Ok(out)
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    (-((x - mu) / sigma).powi(2)).exp()
}
