//! Shared plumbing between subcommands: dataset loading, subject-wise
//! splits, seed-model construction, and evaluation of integer models under
//! the same protocol as float ones.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use tinybp::data::synth::{self, SynthConfig};
use tinybp::data::{build_windows, extract_labels, mae, ndjson, split, Record, WindowSet};
use tinybp::graph::{
    build_resnet1d, build_unet1d, Graph, ResNetConfig, Shape, UNetConfig,
};
use tinybp::intrt::{interp, IntGraph};
use tinybp::model::{to_train_data, EvalReport, FloatModel, TargetKind, TrainData, TARGET_SCALE};

use crate::config::{parse_dataset, DatasetSpec, PipelineConfig, Profile, TargetSpec};

pub fn load_records(cfg: &PipelineConfig) -> Result<Vec<Record>> {
    match parse_dataset(&cfg.dataset)? {
        DatasetSpec::Synthetic { seed } => {
            let recs = synth::generate(&SynthConfig {
                n_subjects: cfg.synth_subjects,
                seconds: cfg.synth_seconds,
                seed,
                ..SynthConfig::default()
            })?;
            Ok(recs)
        }
        DatasetSpec::Path(path) => {
            let recs = ndjson::read_records_path(&path)
                .with_context(|| format!("cannot load records from {}", path.display()))?;
            if recs.is_empty() {
                bail!("{} holds no records", path.display());
            }
            Ok(recs)
        }
    }
}

/// Subject-held-out train/val/test windows (70/15/15), deterministic per
/// config seed.
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let records = load_records(cfg)?;
    let window_len = (cfg.window_seconds * 125.0).round() as usize;
    let (ws, warnings) = build_windows(&records, cfg.window_seconds, window_len)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if ws.is_empty() {
        bail!("no usable windows; every record was shorter than one window");
    }
    let (train, val, test) = split::holdout_subjects(&ws.subjects, cfg.seed)?;
    let splits = Splits {
        train: split::subset(&ws, &train),
        val: split::subset(&ws, &val),
        test: split::subset(&ws, &test),
    };
    for (name, part) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if part.is_empty() {
            bail!(
                "the {name} split has no windows; add subjects or lengthen the records \
                 (got {} subjects, {} windows total)",
                ws.subjects.len(),
                ws.len()
            );
        }
    }
    Ok(splits)
}

/// The target the configured profile actually predicts, sized for
/// `window_len`-sample inputs.
pub fn target_kind(cfg: &PipelineConfig, window_len: usize) -> Result<TargetKind> {
    match (cfg.profile, cfg.target) {
        (Profile::Resnet, TargetSpec::Sbp) => Ok(TargetKind::Sbp),
        (Profile::Resnet, TargetSpec::Dbp) => Ok(TargetKind::Dbp),
        (Profile::Unet, TargetSpec::Sig2sig) => {
            let len = unet_len(window_len)?;
            Ok(TargetKind::Abp { len })
        }
        (Profile::Resnet, TargetSpec::Sig2sig) => bail!(
            "the resnet profile predicts one scalar; use --profile unet for sig2sig"
        ),
        (Profile::Unet, t) => bail!(
            "the unet profile reconstructs the waveform; use --target sig2sig \
             or --profile resnet for {t}"
        ),
    }
}

fn unet_len(window_len: usize) -> Result<usize> {
    let step = 1 << UNetConfig::default().depth;
    let len = window_len / step * step;
    if len == 0 {
        bail!("windows of {window_len} samples are too short for the unet profile");
    }
    Ok(len)
}

/// Build the configured seed architecture for `window_len`-sample windows.
/// Profiles whose native length divides unevenly consume the window behind
/// a tail-trim adapter.
pub fn seed_graph(cfg: &PipelineConfig, window_len: usize) -> Result<Graph> {
    match cfg.profile {
        Profile::Resnet => Ok(build_resnet1d(&ResNetConfig {
            input_len: window_len,
            ..ResNetConfig::default()
        })?),
        Profile::Unet => {
            let len = unet_len(window_len)?;
            let g = build_unet1d(&UNetConfig {
                input_len: len,
                ..UNetConfig::default()
            })?;
            if len == window_len {
                Ok(g)
            } else {
                Ok(g.with_trimmed_input(window_len)?)
            }
        }
    }
}

/// Training targets for a window set under the configured profile, with the
/// scalar-only refusal surfaced as a usage error.
pub fn train_data(cfg: &PipelineConfig, ws: &WindowSet) -> Result<TrainData> {
    let kind = target_kind(cfg, ws.window_len)?;
    to_train_data(ws, kind).with_context(|| match cfg.target {
        TargetSpec::Sig2sig => format!(
            "sig2sig models cannot be trained on {}; its records carry only scalar labels",
            cfg.dataset
        ),
        _ => format!("cannot assemble training targets from {}", cfg.dataset),
    })
}

/// Evaluation target for an already-built model: scalar targets pass
/// through; series targets take their length from the model output.
pub fn eval_kind(cfg: &PipelineConfig, model: &FloatModel) -> Result<TargetKind> {
    match cfg.target {
        TargetSpec::Sbp => Ok(TargetKind::Sbp),
        TargetSpec::Dbp => Ok(TargetKind::Dbp),
        TargetSpec::Sig2sig => match model.graph.output_shape()? {
            Shape::Series { c: 1, l } => Ok(TargetKind::Abp { len: l }),
            s => bail!("sig2sig evaluation needs a 1-channel series output, got {s:?}"),
        },
    }
}

pub fn load_model(path: &Path) -> Result<FloatModel> {
    FloatModel::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// Check that a model can consume the prepared windows before spending any
/// time on it.
pub fn check_window_len(model_len: usize, ws: &WindowSet) -> Result<()> {
    if model_len != ws.window_len {
        bail!(
            "checkpoint expects {model_len}-sample windows but the dataset yields \
             {}-sample ones; adjust --window-seconds",
            ws.window_len
        );
    }
    Ok(())
}

/// Score an integer model with the float protocol: quantize each window,
/// run the interpreter, dequantize, undo the training scale, and take MAE
/// against the window labels (series outputs score their extremes).
pub fn evaluate_int(g: &IntGraph, ws: &WindowSet, target: TargetSpec) -> Result<EvalReport> {
    if ws.is_empty() {
        bail!("cannot evaluate on an empty window set");
    }
    let Shape::Series { c: 1, l } = g.input_shape() else {
        bail!("integer model wants input {:?}, not 1-channel windows", g.input_shape());
    };
    check_window_len(l, ws)?;
    let mut pred_sbp = Vec::with_capacity(ws.len());
    let mut pred_dbp = Vec::with_capacity(ws.len());
    for i in 0..ws.len() {
        let q = interp::quantize_input(g, ws.window(i))?;
        let out = interp::run(g, &q)?;
        let y: Vec<f32> = interp::dequantize_output(g, &out)
            .iter()
            .map(|v| v * TARGET_SCALE)
            .collect();
        match target {
            TargetSpec::Sbp | TargetSpec::Dbp => {
                if y.len() != 1 {
                    bail!("scalar evaluation needs 1-element outputs, got {}", y.len());
                }
                pred_sbp.push(y[0]);
            }
            TargetSpec::Sig2sig => {
                let (s, d) = extract_labels(&y);
                pred_sbp.push(s);
                pred_dbp.push(d);
            }
        }
    }
    Ok(match target {
        TargetSpec::Sbp => EvalReport {
            mae_sbp: Some(mae(&pred_sbp, &ws.sbp)?),
            mae_dbp: None,
        },
        TargetSpec::Dbp => EvalReport {
            mae_sbp: None,
            mae_dbp: Some(mae(&pred_sbp, &ws.dbp)?),
        },
        TargetSpec::Sig2sig => EvalReport {
            mae_sbp: Some(mae(&pred_sbp, &ws.sbp)?),
            mae_dbp: Some(mae(&pred_dbp, &ws.dbp)?),
        },
    })
}

/// Flat eval summary written next to checkpoints and read back by `report`
/// for the seed marker.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub mae_sbp: Option<f64>,
    pub mae_dbp: Option<f64>,
    pub params: u64,
    pub size_bytes: u64,
    pub macs: u64,
    pub windows: usize,
}

impl EvalSummary {
    pub fn new(report: &EvalReport, model: &FloatModel, windows: usize) -> Result<EvalSummary> {
        let params = model.param_count();
        Ok(EvalSummary {
            mae_sbp: report.mae_sbp,
            mae_dbp: report.mae_dbp,
            params,
            size_bytes: 4 * params,
            macs: model.graph.mac_count()?,
            windows,
        })
    }

    /// The error coordinate used on the size/error plane.
    pub fn error(&self) -> Option<f64> {
        match (self.mae_sbp, self.mae_dbp) {
            (Some(s), Some(d)) => Some(0.5 * (s + d)),
            (Some(s), None) => Some(s),
            (None, Some(d)) => Some(d),
            (None, None) => None,
        }
    }
}

pub fn describe_report(r: &EvalReport) -> String {
    let mut parts = Vec::new();
    if let Some(s) = r.mae_sbp {
        parts.push(format!("sbp {s:.3} mmHg"));
    }
    if let Some(d) = r.mae_dbp {
        parts.push(format!("dbp {d:.3} mmHg"));
    }
    parts.join(", ")
}

pub fn mean_error(r: &EvalReport) -> Result<f64> {
    match (r.mae_sbp, r.mae_dbp) {
        (Some(s), Some(d)) => Ok(0.5 * (s + d)),
        (Some(s), None) => Ok(s),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(anyhow!("evaluation produced no error figure")),
    }
}
