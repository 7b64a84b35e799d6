//! Cost-weight sweep: one search per weight, yielding a size/error curve.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{self, FloatModel, TargetKind, TrainConfig};
use crate::model::TrainData;
use crate::nas::{train_supernet, NasTrainConfig, SuperNet};

/// Default sweep grid: 18 log-spaced cost weights from 1e-11 to 1e-7.
pub fn lambda_grid() -> Vec<f64> {
    (0..18)
        .map(|i| 10f64.powf(-11.0 + 4.0 * i as f64 / 17.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Per-point search settings; the `lambda` field is overridden by each
    /// grid entry.
    pub nas: NasTrainConfig,
    /// Fine-tuning budget for each discretized child.
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub target: TargetKind,
    /// Init seed for supernet expansion and child fine-tuning.
    pub seed: u64,
}

/// One sweep outcome. `child` holds the fine-tuned model in checkpoint
/// container bytes so results can cross threads and land on disk untouched.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f64,
    pub params: u64,
    pub size_bytes: u64,
    pub macs: u64,
    pub mae_sbp: Option<f64>,
    pub mae_dbp: Option<f64>,
    pub seed: u64,
    pub child: Vec<u8>,
}

/// CSV row mirror of [`SweepPoint`]; column order is the fixed schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub params: u64,
    pub size_bytes: u64,
    pub macs: u64,
    pub mae_sbp: Option<f64>,
    pub mae_dbp: Option<f64>,
    pub seed: u64,
}

impl SweepPoint {
    pub fn row(&self) -> SweepRow {
        SweepRow {
            lambda: self.lambda,
            params: self.params,
            size_bytes: self.size_bytes,
            macs: self.macs,
            mae_sbp: self.mae_sbp,
            mae_dbp: self.mae_dbp,
            seed: self.seed,
        }
    }
}

fn run_point(
    seed_model: &[u8],
    train: &TrainData,
    val: &TrainData,
    eval: &WindowSet,
    cfg: &SweepConfig,
    lambda: f64,
) -> Result<SweepPoint> {
    let seed = FloatModel::from_bytes(seed_model)?;
    let mut sn = SuperNet::from_seed(seed, cfg.seed)?;
    let nas_cfg = NasTrainConfig {
        lambda,
        ..cfg.nas
    };
    train_supernet(&mut sn, train, val, &nas_cfg)?;
    let mut child = sn.discretize()?;
    if cfg.ft_epochs > 0 {
        model::train(
            &mut child,
            train,
            &TrainConfig {
                epochs: cfg.ft_epochs,
                batch_size: cfg.nas.batch_size,
                lr: cfg.ft_lr,
                seed: cfg.seed,
            },
        )?;
    }
    let report = model::evaluate(&mut child, eval, cfg.target)?;
    let params = child.param_count();
    Ok(SweepPoint {
        lambda,
        params,
        size_bytes: 4 * params,
        macs: child.graph.mac_count()?,
        mae_sbp: report.mae_sbp,
        mae_dbp: report.mae_dbp,
        seed: cfg.seed,
        child: child.to_bytes()?,
    })
}

/// Search once per cost weight, in parallel. Points are independent, so
/// results are deterministic per (seed model, weight, seed) regardless of
/// worker count. Evaluation runs against `eval` windows.
pub fn run_sweep(
    seed_model: &[u8],
    train: &TrainData,
    val: &TrainData,
    eval: &WindowSet,
    cfg: &SweepConfig,
) -> Result<Vec<SweepPoint>> {
    if cfg.lambdas.is_empty() {
        return Err(Error::Invalid("sweep needs at least one cost weight".into()));
    }
    cfg.lambdas
        .par_iter()
        .map(|&lambda| run_point(seed_model, train, val, eval, cfg, lambda))
        .collect()
}

/// Non-dominated flags for `(size, error)` points under weak dominance: a
/// point is dropped iff some other point is no larger and no worse with at
/// least one strict improvement. Exact duplicates are all kept.
pub fn pareto_flags(points: &[(f64, f64)]) -> Result<Vec<bool>> {
    if points
        .iter()
        .any(|p| !(p.0.is_finite() && p.1.is_finite()))
    {
        return Err(Error::Numerical(
            "dominance needs finite sizes and errors".into(),
        ));
    }
    let n = points.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).expect("finite"));
    let mut keep = vec![false; n];
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < n {
        let size = points[idx[i]].0;
        let mut j = i;
        let mut gmin = f64::INFINITY;
        while j < n && points[idx[j]].0 == size {
            gmin = gmin.min(points[idx[j]].1);
            j += 1;
        }
        for &p in &idx[i..j] {
            keep[p] = points[p].1 == gmin && gmin < best;
        }
        best = best.min(gmin);
        i = j;
    }
    Ok(keep)
}

/// Dominance error for a row: the mean of whichever errors it carries.
pub fn row_error(row: &SweepRow) -> Option<f64> {
    match (row.mae_sbp, row.mae_dbp) {
        (Some(s), Some(d)) => Some(0.5 * (s + d)),
        (Some(s), None) => Some(s),
        (None, Some(d)) => Some(d),
        (None, None) => None,
    }
}

/// Pareto flags over sweep rows on (size_bytes, error).
pub fn pareto_rows(rows: &[SweepRow]) -> Result<Vec<bool>> {
    let points = rows
        .iter()
        .map(|r| {
            let e = row_error(r).ok_or_else(|| {
                Error::Invalid(format!("row for lambda {} has no error column", r.lambda))
            })?;
            Ok((r.size_bytes as f64, e))
        })
        .collect::<Result<Vec<_>>>()?;
    pareto_flags(&points)
}

/// Write rows with the fixed header `lambda,params,size_bytes,macs,
/// mae_sbp,mae_dbp,seed`. Absent errors serialize as empty cells.
pub fn write_rows(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv flush: {e}")))?;
    // Atomic publish so a half-written table never looks complete.
    let tmp = path.as_ref().with_extension("csv.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Parse(format!("csv open: {e}")))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("csv row: {e}"))))
        .collect()
}
