//! Per-subject split policies. Windows from one subject never land in two
//! different splits, which is what makes the evaluation honest: the model
//! cannot memorize a subject's morphology in training and meet it again at
//! test time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prep::WindowSet;
use crate::error::{Error, Result};

/// Shuffle subjects and deal them into `k` folds. Fold `i` of the result is
/// `(train_subjects, val_subjects)` where the validation group is the i-th
/// slice and training is everyone else.
pub fn kfold_subjects(
    subjects: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 {
        return Err(Error::Invalid("k-fold needs k >= 2".into()));
    }
    if subjects.len() < k {
        return Err(Error::Invalid(format!(
            "cannot split {} subjects into {k} folds",
            subjects.len()
        )));
    }
    let mut order: Vec<String> = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        // Deal round-robin so fold sizes differ by at most one.
        let val: Vec<String> = order.iter().skip(i).step_by(k).cloned().collect();
        let train: Vec<String> = order
            .iter()
            .enumerate()
            .filter(|(j, _)| j % k != i)
            .map(|(_, s)| s.clone())
            .collect();
        folds.push((train, val));
    }
    Ok(folds)
}

/// Shuffle subjects into train/val/test at roughly 70/15/15. Validation and
/// test get at least one subject each; training gets the rest and shrinks if
/// the rounded shares would overrun. Needs at least three subjects.
pub fn holdout_subjects(
    subjects: &[String],
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "holdout split needs at least 3 subjects, got {n}"
        )));
    }
    let mut order: Vec<String> = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = ((0.7 * n as f64).floor() as usize).max(1);
    let n_val = ((0.15 * n as f64).floor() as usize).max(1);
    // Keep at least one test subject.
    while n_train + n_val + 1 > n {
        n_train -= 1;
    }
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Windows belonging to the listed subjects, in original order.
pub fn subset(ws: &WindowSet, keep: &[String]) -> WindowSet {
    let keep_idx: Vec<bool> = ws
        .subjects
        .iter()
        .map(|s| keep.iter().any(|k| k == s))
        .collect();
    let l = ws.window_len;
    let mut out = WindowSet {
        window_len: l,
        x: Vec::new(),
        sbp: Vec::new(),
        dbp: Vec::new(),
        abp: ws.abp.as_ref().map(|_| Vec::new()),
        subjects: Vec::new(),
        subject_of: Vec::new(),
    };
    let mut remap = vec![u32::MAX; ws.subjects.len()];
    for i in 0..ws.len() {
        let s = ws.subject_of[i] as usize;
        if !keep_idx[s] {
            continue;
        }
        if remap[s] == u32::MAX {
            remap[s] = out.subjects.len() as u32;
            out.subjects.push(ws.subjects[s].clone());
        }
        out.subject_of.push(remap[s]);
        out.x.extend_from_slice(ws.window(i));
        out.sbp.push(ws.sbp[i]);
        out.dbp.push(ws.dbp[i]);
        if let (Some(dst), Some(src)) = (out.abp.as_mut(), ws.abp_window(i)) {
            dst.extend_from_slice(src);
        }
    }
    out
}
