//! Quantization-aware training: batch-norm folding, quantization-site
//! planning, range calibration, and fake-quant fine-tuning.
//!
//! The float graph is first folded so every normalization disappears into
//! the preceding convolution. Each remaining edge then gets a quantization
//! site: ReLU nodes become trainable clipping activations, producer nodes
//! get frozen affine parameters from calibration, and grid-preserving nodes
//! inherit their input's parameters. Training runs the usual mini-batch
//! loop with fake-quantized weights and activations so the straight-through
//! gradients adapt the model to the int8 grid it will run on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerSpec, INPUT};
use crate::model::{self, clone_params, FloatModel, NodeParams, TrainData, BN_EPS};
use crate::quant::{self, minmax_affine_params_iter, QuantParams};
use crate::tensor::{backward, ops, Adam, Tensor, Value};

/// Smallest permitted clipping threshold; keeps activation scales positive.
pub const ALPHA_FLOOR: f32 = 1e-3;

/// Fold every batch-norm node into the convolution it normalizes and splice
/// it out of the graph. Uses the running statistics, so the folded model
/// matches the original's eval-mode forward up to rounding.
///
/// Requires each batch norm to directly follow a `Conv1d` or `DwBlock` that
/// has no other consumers; anything else cannot be absorbed into a weight
/// rescale and is an error.
pub fn fold_batchnorm(src: &FloatModel) -> Result<FloatModel> {
    let g = &src.graph;
    let mut out = Graph::new(g.input_channels, g.input_len);
    let mut params: Vec<NodeParams> = Vec::new();
    // resolve[i] = index in the folded graph producing old node i's value
    let mut resolve: Vec<usize> = Vec::with_capacity(g.nodes.len());

    for (i, node) in g.nodes.iter().enumerate() {
        if !matches!(node.spec, LayerSpec::BatchNorm { .. }) {
            let inputs = node
                .inputs
                .iter()
                .map(|&s| if s == INPUT { INPUT } else { resolve[s] })
                .collect();
            let idx = out.push(node.spec, inputs);
            params.push(clone_params(&src.params[i])?);
            resolve.push(idx);
            continue;
        }

        let conv = node.inputs[0];
        if conv == INPUT {
            return Err(Error::Quant(
                "batch norm directly on the input cannot be folded".into(),
            ));
        }
        if !matches!(
            g.nodes[conv].spec,
            LayerSpec::Conv1d { .. } | LayerSpec::DwBlock { .. }
        ) {
            return Err(Error::Quant(format!(
                "batch norm at node {i} follows {:?}; folding needs a convolution",
                g.nodes[conv].spec
            )));
        }
        if g.consumers(conv) != [i] {
            return Err(Error::Quant(format!(
                "node {conv} feeds more than its batch norm; cannot fold"
            )));
        }
        let NodeParams::Bn {
            gamma,
            beta,
            running_mean,
            running_var,
        } = &src.params[i]
        else {
            return Err(Error::Invalid(format!("node {i} has non-norm params")));
        };
        let gamma = gamma.data();
        let beta = beta.data();
        let folded = resolve[conv];
        // Per output channel: w *= g/sqrt(v+eps), b = (b-mean)*g/sqrt(v+eps)+beta.
        match &params[folded] {
            NodeParams::Conv { w, b } => {
                let (w, b) = scale_conv(w, b, &gamma, &beta, running_mean, running_var)?;
                params[folded] = NodeParams::Conv { w, b };
            }
            NodeParams::Dw {
                dw_w,
                dw_b,
                pw_w,
                pw_b,
            } => {
                let (pw_w, pw_b) =
                    scale_conv(pw_w, pw_b, &gamma, &beta, running_mean, running_var)?;
                params[folded] = NodeParams::Dw {
                    dw_w: dw_w.clone(),
                    dw_b: dw_b.clone(),
                    pw_w,
                    pw_b,
                };
            }
            other => {
                return Err(Error::Invalid(format!(
                    "node {conv} has non-conv params {other:?}"
                )))
            }
        }
        resolve.push(folded);
    }

    // Splicing a trailing batch norm moves the output; pin it back.
    let last = resolve[g.nodes.len() - 1];
    if last != out.nodes.len() - 1 {
        out.push(LayerSpec::Identity, vec![last]);
        params.push(NodeParams::None);
    }
    out.validate()?;
    Ok(FloatModel { graph: out, params })
}

fn scale_conv(
    w: &Value<f32>,
    b: &Value<f32>,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
) -> Result<(Value<f32>, Value<f32>)> {
    let c_out = w.shape()[0];
    if gamma.len() != c_out {
        return Err(Error::Shape(format!(
            "norm over {} channels cannot fold into a {c_out}-channel conv",
            gamma.len()
        )));
    }
    let per = w.len() / c_out;
    let mut wd = w.data().clone();
    let mut bd = b.data().clone();
    for c in 0..c_out {
        let inv = gamma[c] / (var[c] + BN_EPS).sqrt();
        for v in &mut wd[c * per..(c + 1) * per] {
            *v *= inv;
        }
        bd[c] = (bd[c] - mean[c]) * inv + beta[c];
    }
    Ok((
        Tensor::leaf(w.shape(), wd, true)?,
        Tensor::leaf(b.shape(), bd, true)?,
    ))
}

/// Where a node's output lands on the int8 grid.
#[derive(Debug)]
pub enum Site {
    /// Trainable clipping activation replacing a ReLU: `clamp(x, 0, alpha)`
    /// snapped to 256 levels of step `alpha/255`.
    Pact { alpha: Value<f32> },
    /// Frozen affine parameters from calibration.
    Affine { q: QuantParams },
    /// Output stays on (or is snapped to) the input edge's grid.
    Inherit,
    /// Sole consumer is a ReLU whose activation quantizes this edge; the raw
    /// float value passes through untouched.
    Fused,
}

/// A folded float model with quantization sites attached. Forward passes
/// fake-quantize the input, the weights (min-max, recomputed each pass) and
/// every activation edge, so training sees exactly the rounding the integer
/// runtime will apply. Biases stay float here; they are only quantized at
/// export.
#[derive(Debug)]
pub struct QatModel {
    pub model: FloatModel,
    pub input_q: QuantParams,
    pub sites: Vec<Site>,
    /// Affine parameters for the hidden edge inside each `DwBlock`.
    pub inner_q: Vec<Option<QuantParams>>,
}

fn is_producer(spec: &LayerSpec) -> bool {
    matches!(
        spec,
        LayerSpec::Conv1d { .. }
            | LayerSpec::DwBlock { .. }
            | LayerSpec::Linear { .. }
            | LayerSpec::Add
            | LayerSpec::Concat
    )
}

fn snaps_to_input_grid(spec: &LayerSpec) -> bool {
    // Averages land between grid points and need a re-snap; max, copy and
    // reorder operations return existing grid values untouched.
    matches!(spec, LayerSpec::AvgPool { .. } | LayerSpec::GlobalAvgPool)
}

impl QatModel {
    /// Plan sites for a folded model and calibrate their ranges on one batch
    /// of representative inputs (shape `[n, c, l]`).
    pub fn attach(model: FloatModel, calib: &Value<f32>) -> Result<QatModel> {
        let g = &model.graph;
        let n = g.nodes.len();

        #[derive(Clone, Copy, PartialEq)]
        enum Plan {
            Pact,
            Affine,
            Inherit,
            Fused,
        }
        let mut plan = Vec::with_capacity(n);
        for (i, node) in g.nodes.iter().enumerate() {
            plan.push(match node.spec {
                LayerSpec::Relu => Plan::Pact,
                LayerSpec::BatchNorm { .. } => {
                    return Err(Error::Quant(format!(
                        "node {i} is an unfolded batch norm; fold before attaching"
                    )))
                }
                ref spec if is_producer(spec) => {
                    let cons = g.consumers(i);
                    if cons.len() == 1 && matches!(g.nodes[cons[0]].spec, LayerSpec::Relu) {
                        Plan::Fused
                    } else {
                        Plan::Affine
                    }
                }
                _ => Plan::Inherit,
            });
        }

        // One pass over the calibration batch with input and weights already
        // fake-quantized (activations still float), reducing each edge to
        // min/max (affine sites) or the full sample vector (clip sites).
        // Calibrating on the quantized-weight forward keeps the ranges valid
        // for the distribution training will actually see.
        let input_q = minmax_affine_params(calib.data().as_slice())?;
        let xq = quant::fake_quant(calib, input_q)?;
        let mut ranges: Vec<(f32, f32)> = vec![(f32::INFINITY, f32::NEG_INFINITY); n];
        let mut inner_ranges: Vec<(f32, f32)> = vec![(f32::INFINITY, f32::NEG_INFINITY); n];
        let mut clip_samples: Vec<Vec<f32>> = vec![Vec::new(); n];
        calib_pass(&model, &xq, |i, out, mid| {
            if plan[i] == Plan::Pact {
                clip_samples[i].extend_from_slice(&out.data());
            } else {
                widen(&mut ranges[i], &out.data());
            }
            if let Some(mid) = mid {
                widen(&mut inner_ranges[i], &mid.data());
            }
        })?;

        let mut sites = Vec::with_capacity(n);
        let mut inner_q = vec![None; n];
        for i in 0..n {
            sites.push(match plan[i] {
                Plan::Pact => Site::Pact {
                    alpha: Tensor::leaf(
                        &[1],
                        vec![clip_percentile(&mut clip_samples[i])?],
                        true,
                    )?,
                },
                Plan::Affine => Site::Affine {
                    q: range_params(ranges[i])?,
                },
                Plan::Inherit => Site::Inherit,
                Plan::Fused => Site::Fused,
            });
            if matches!(g.nodes[i].spec, LayerSpec::DwBlock { .. }) {
                inner_q[i] = Some(range_params(inner_ranges[i])?);
            }
        }
        Ok(QatModel {
            model,
            input_q,
            sites,
            inner_q,
        })
    }

    /// Effective quantization parameters of each node's output edge, using
    /// the current clipping thresholds. Entries for fused nodes are the
    /// input edge's parameters as a placeholder; nothing reads a fused edge
    /// except the activation that absorbs it.
    pub fn edge_quant(&self) -> Vec<QuantParams> {
        let g = &self.model.graph;
        let mut eq: Vec<QuantParams> = Vec::with_capacity(g.nodes.len());
        for (i, node) in g.nodes.iter().enumerate() {
            let from_input = |j: usize| {
                if node.inputs[j] == INPUT {
                    self.input_q
                } else {
                    eq[node.inputs[j]]
                }
            };
            eq.push(match &self.sites[i] {
                Site::Pact { alpha } => pact_params(alpha.item()),
                Site::Affine { q } => *q,
                Site::Inherit | Site::Fused => from_input(0),
            });
        }
        eq
    }

    /// Fake-quant forward over a `[n, c, l]` batch.
    pub fn forward(&self, x: &Value<f32>) -> Result<Value<f32>> {
        let g = &self.model.graph;
        if x.shape().len() != 3
            || x.shape()[1] != g.input_channels
            || x.shape()[2] != g.input_len
        {
            return Err(Error::Shape(format!(
                "model expects [n, {}, {}], got {:?}",
                g.input_channels,
                g.input_len,
                x.shape()
            )));
        }
        let eq = self.edge_quant();
        let xq = quant::fake_quant(x, self.input_q)?;
        let mut outs: Vec<Value<f32>> = Vec::with_capacity(g.nodes.len());
        for (i, node) in g.nodes.iter().enumerate() {
            let ins: Vec<Value<f32>> = node
                .inputs
                .iter()
                .map(|&s| if s == INPUT { xq.clone() } else { outs[s].clone() })
                .collect();
            let a = &ins[0];
            let raw = match (&node.spec, &self.model.params[i]) {
                (LayerSpec::Conv1d { stride, padding, .. }, NodeParams::Conv { w, b }) => {
                    ops::conv1d(a, &ops::fake_quant_minmax(w)?, Some(b), *stride, *padding)?
                }
                (
                    LayerSpec::DwBlock { stride, padding, .. },
                    NodeParams::Dw {
                        dw_w,
                        dw_b,
                        pw_w,
                        pw_b,
                    },
                ) => {
                    let mid = ops::depthwise_conv1d(
                        a,
                        &ops::fake_quant_minmax(dw_w)?,
                        Some(dw_b),
                        *stride,
                        *padding,
                    )?;
                    let mid = quant::fake_quant(&mid, self.inner_q[i].unwrap())?;
                    ops::conv1d(&mid, &ops::fake_quant_minmax(pw_w)?, Some(pw_b), 1, 0)?
                }
                (LayerSpec::Linear { .. }, NodeParams::Linear { w, b }) => {
                    ops::linear(a, &ops::fake_quant_minmax(w)?, Some(b))?
                }
                (LayerSpec::Relu, _) => a.clone(),
                (LayerSpec::Identity, _) => a.clone(),
                (LayerSpec::MaxPool { k, stride }, _) => ops::maxpool1d(a, *k, *stride)?,
                (LayerSpec::AvgPool { k, stride }, _) => ops::avgpool1d(a, *k, *stride)?,
                (LayerSpec::Upsample { factor }, _) => ops::upsample_nearest(a, *factor)?,
                (LayerSpec::Add, _) => ops::add(a, &ins[1])?,
                (LayerSpec::Concat, _) => ops::concat_channels(&ins)?,
                (LayerSpec::GlobalAvgPool, _) => ops::global_avg_pool(a)?,
                (LayerSpec::TrimTail { len }, _) => ops::trim_tail(a, *len)?,
                (spec, params) => {
                    return Err(Error::Invalid(format!(
                        "node {i}: spec {spec:?} does not match params {params:?}"
                    )))
                }
            };
            let y = match &self.sites[i] {
                Site::Pact { alpha } => quant::pact_activation(&raw, alpha)?,
                Site::Affine { q } => quant::fake_quant(&raw, *q)?,
                Site::Inherit if snaps_to_input_grid(&node.spec) => {
                    let q = if node.inputs[0] == INPUT {
                        self.input_q
                    } else {
                        eq[node.inputs[0]]
                    };
                    quant::fake_quant(&raw, q)?
                }
                Site::Inherit | Site::Fused => raw,
            };
            outs.push(y);
        }
        Ok(outs.pop().expect("graphs are non-empty"))
    }

    /// The clipping thresholds, in node order.
    pub fn alphas(&self) -> Vec<Value<f32>> {
        self.sites
            .iter()
            .filter_map(|s| match s {
                Site::Pact { alpha } => Some(alpha.clone()),
                _ => None,
            })
            .collect()
    }

    /// Everything fine-tuning updates: model weights plus clip thresholds.
    pub fn trainable(&self) -> Vec<Value<f32>> {
        let mut out = self.model.parameters();
        out.extend(self.alphas());
        out
    }
}

fn widen(range: &mut (f32, f32), vals: &[f32]) {
    for &v in vals {
        range.0 = range.0.min(v);
        range.1 = range.1.max(v);
    }
}

fn range_params(range: (f32, f32)) -> Result<QuantParams> {
    minmax_affine_params_iter([range.0 as f64, range.1 as f64].into_iter())
}

fn minmax_affine_params(vals: &[f32]) -> Result<QuantParams> {
    minmax_affine_params_iter(vals.iter().map(|&v| v as f64))
}

fn pact_params(alpha: f32) -> QuantParams {
    // Unsigned 256-level grid over [0, alpha], stored with int8 offset -128.
    QuantParams {
        scale: alpha as f64 / 255.0,
        zero_point: -128,
    }
}

/// 99.9th-percentile clip threshold by nearest rank, floored away from zero.
fn clip_percentile(vals: &mut Vec<f32>) -> Result<f32> {
    if vals.is_empty() {
        return Err(Error::Quant("no calibration samples for a clip site".into()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite calibration sample".into()));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let idx = ((0.999 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(vals[idx].max(ALPHA_FLOOR))
}

/// Quantized-weight float forward that surfaces every node output (and the
/// hidden depthwise edge) to the visitor, freeing activations as soon as
/// their last consumer has run. The caller fake-quantizes `x`.
fn calib_pass(
    model: &FloatModel,
    x: &Value<f32>,
    mut visit: impl FnMut(usize, &Value<f32>, Option<&Value<f32>>),
) -> Result<()> {
    let g = &model.graph;
    let mut uses: Vec<usize> = (0..g.nodes.len()).map(|i| g.consumers(i).len()).collect();
    let mut outs: Vec<Option<Value<f32>>> = vec![None; g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        let ins: Vec<Value<f32>> = node
            .inputs
            .iter()
            .map(|&s| {
                if s == INPUT {
                    x.clone()
                } else {
                    outs[s].clone().expect("inputs precede consumers")
                }
            })
            .collect();
        let a = &ins[0];
        let mut mid = None;
        let y = match (&node.spec, &model.params[i]) {
            (LayerSpec::Conv1d { stride, padding, .. }, NodeParams::Conv { w, b }) => {
                ops::conv1d(a, &ops::fake_quant_minmax(w)?, Some(b), *stride, *padding)?
            }
            (
                LayerSpec::DwBlock { stride, padding, .. },
                NodeParams::Dw {
                    dw_w,
                    dw_b,
                    pw_w,
                    pw_b,
                },
            ) => {
                let m = ops::depthwise_conv1d(
                    a,
                    &ops::fake_quant_minmax(dw_w)?,
                    Some(dw_b),
                    *stride,
                    *padding,
                )?;
                let y = ops::conv1d(&m, &ops::fake_quant_minmax(pw_w)?, Some(pw_b), 1, 0)?;
                mid = Some(m);
                y
            }
            (LayerSpec::Linear { .. }, NodeParams::Linear { w, b }) => {
                ops::linear(a, &ops::fake_quant_minmax(w)?, Some(b))?
            }
            (LayerSpec::Relu, _) => ops::relu(a)?,
            (LayerSpec::Identity, _) => a.clone(),
            (LayerSpec::MaxPool { k, stride }, _) => ops::maxpool1d(a, *k, *stride)?,
            (LayerSpec::AvgPool { k, stride }, _) => ops::avgpool1d(a, *k, *stride)?,
            (LayerSpec::Upsample { factor }, _) => ops::upsample_nearest(a, *factor)?,
            (LayerSpec::Add, _) => ops::add(a, &ins[1])?,
            (LayerSpec::Concat, _) => ops::concat_channels(&ins)?,
            (LayerSpec::GlobalAvgPool, _) => ops::global_avg_pool(a)?,
            (LayerSpec::TrimTail { len }, _) => ops::trim_tail(a, *len)?,
            (spec, _) => {
                return Err(Error::Invalid(format!(
                    "cannot calibrate through node {i} ({spec:?})"
                )))
            }
        };
        visit(i, &y, mid.as_ref());
        outs[i] = Some(y);
        for &s in &node.inputs {
            if s != INPUT {
                uses[s] -= 1;
                if uses[s] == 0 {
                    outs[s] = None;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct QatConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training windows used to calibrate ranges before tuning, sampled
    /// evenly across the dataset so every subject contributes.
    pub calib_windows: usize,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            epochs: 3,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            calib_windows: 64,
        }
    }
}

/// Fold, calibrate and fine-tune a trained float model for int8 execution.
/// With `epochs = 0` the weights are left untouched and only the sites are
/// attached, which is enough to export.
pub fn qat_finetune(src: &FloatModel, data: &TrainData, cfg: &QatConfig) -> Result<QatModel> {
    if data.n == 0 {
        return Err(Error::Invalid("cannot calibrate on an empty dataset".into()));
    }
    let folded = fold_batchnorm(src)?;
    // Windows arrive grouped by subject; spreading the picks keeps one
    // subject's range from deciding every clip threshold.
    let take = cfg.calib_windows.clamp(1, data.n);
    let idx: Vec<usize> = (0..take).map(|j| j * data.n / take).collect();
    let (calib, _) = data.batch(&idx)?;
    let qm = QatModel::attach(folded, &calib)?;
    if cfg.epochs == 0 {
        return Ok(qm);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let alphas = qm.alphas();
    let mut opt = Adam::new(qm.trainable(), cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let pred = qm.forward(&x)?;
            let loss = ops::mse(&pred, &y)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("tuning loss became {lv}")));
            }
            backward(&loss)?;
            opt.step()?;
            opt.zero_grad();
            // A clip threshold driven to zero would collapse its scale.
            for a in &alphas {
                let v = a.item();
                if v < ALPHA_FLOOR {
                    a.set_data(&[ALPHA_FLOOR]);
                }
            }
        }
    }
    Ok(qm)
}

/// Score a quantization-simulating model with the standard protocol.
pub fn evaluate_quant(
    qm: &QatModel,
    ws: &crate::data::WindowSet,
    kind: model::TargetKind,
) -> Result<model::EvalReport> {
    model::evaluate_with(|x| qm.forward(x), ws, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build::{build_resnet1d, ResNetConfig};
    use crate::model::{to_train_data, train, TargetKind, TrainConfig};
    use rand::prelude::*;

    fn train_batch(model: &mut FloatModel, seed: u64, batches: usize) {
        // A few training-mode passes so the running statistics move off
        // their initial values and folding actually has work to do.
        let g = &model.graph;
        let (c, l) = (g.input_channels, g.input_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..batches {
            let x: Vec<f32> = (0..4 * c * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::leaf(&[4, c, l], x, false).unwrap();
            model.forward(&x, true).unwrap();
        }
    }

    fn residual_toy() -> FloatModel {
        let g = build_resnet1d(&ResNetConfig {
            input_len: 32,
            blocks_per_stage: 1,
            base_channels: 4,
            k: 3,
        })
        .unwrap();
        let mut m = FloatModel::init(g, 9).unwrap();
        train_batch(&mut m, 10, 3);
        m
    }

    #[test]
    fn folding_matches_eval_forward() {
        let mut m = residual_toy();
        let folded = fold_batchnorm(&m).unwrap();
        assert!(folded
            .graph
            .nodes
            .iter()
            .all(|n| !matches!(n.spec, LayerSpec::BatchNorm { .. })));
        assert!(folded.graph.nodes.len() < m.graph.nodes.len());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..2 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::leaf(&[2, 1, 32], x, false).unwrap();
        let want = m.forward(&x, false).unwrap();
        let mut folded = folded;
        let got = folded.forward(&x, false).unwrap();
        for (a, b) in want.data().iter().zip(got.data().iter()) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn folding_counts_out_the_norm_params() {
        let m = residual_toy();
        let folded = fold_batchnorm(&m).unwrap();
        let norm: u64 = m
            .graph
            .nodes
            .iter()
            .map(|n| match n.spec {
                LayerSpec::BatchNorm { c } => 2 * c as u64,
                _ => 0,
            })
            .sum();
        assert_eq!(folded.param_count(), m.param_count() - norm);
    }

    #[test]
    fn folding_rejects_awkward_norm_placement() {
        // After a pool there is no weight tensor to absorb the rescale.
        let mut g = Graph::new(2, 8);
        let p = g.push(LayerSpec::MaxPool { k: 2, stride: 2 }, vec![INPUT]);
        g.push(LayerSpec::BatchNorm { c: 2 }, vec![p]);
        let m = FloatModel::init(g, 0).unwrap();
        assert!(fold_batchnorm(&m).is_err());

        // A conv with a second consumer cannot change weights for just one.
        let mut g = Graph::new(2, 8);
        let conv = g.push(
            LayerSpec::Conv1d {
                c_in: 2,
                c_out: 2,
                k: 1,
                stride: 1,
                padding: 0,
            },
            vec![INPUT],
        );
        let bn = g.push(LayerSpec::BatchNorm { c: 2 }, vec![conv]);
        g.push(LayerSpec::Add, vec![bn, conv]);
        let m = FloatModel::init(g, 0).unwrap();
        assert!(fold_batchnorm(&m).is_err());
    }

    #[test]
    fn folding_a_trailing_norm_keeps_the_output_pinned() {
        let mut g = Graph::new(1, 8);
        let conv = g.push(
            LayerSpec::Conv1d {
                c_in: 1,
                c_out: 3,
                k: 3,
                stride: 1,
                padding: 1,
            },
            vec![INPUT],
        );
        g.push(LayerSpec::BatchNorm { c: 3 }, vec![conv]);
        let mut m = FloatModel::init(g, 4).unwrap();
        train_batch(&mut m, 5, 2);
        let folded = fold_batchnorm(&m).unwrap();
        folded.graph.validate().unwrap();
        assert_eq!(folded.graph.output_shape().unwrap(), m.graph.output_shape().unwrap());
    }

    #[test]
    fn site_plan_fuses_convs_into_activations() {
        let mut g = Graph::new(1, 16);
        let conv = g.push(
            LayerSpec::Conv1d {
                c_in: 1,
                c_out: 4,
                k: 3,
                stride: 1,
                padding: 1,
            },
            vec![INPUT],
        );
        let bn = g.push(LayerSpec::BatchNorm { c: 4 }, vec![conv]);
        let relu = g.push(LayerSpec::Relu, vec![bn]);
        let pool = g.push(LayerSpec::MaxPool { k: 2, stride: 2 }, vec![relu]);
        let gap = g.push(LayerSpec::GlobalAvgPool, vec![pool]);
        g.push(
            LayerSpec::Linear {
                in_features: 4,
                out_features: 1,
            },
            vec![gap],
        );
        let m = FloatModel::init(g, 3).unwrap();
        let folded = fold_batchnorm(&m).unwrap();
        let calib = Tensor::leaf(&[2, 1, 16], vec![0.25; 32], false).unwrap();
        let qm = QatModel::attach(folded, &calib).unwrap();
        assert!(matches!(qm.sites[0], Site::Fused)); // conv feeds only the relu
        assert!(matches!(qm.sites[1], Site::Pact { .. }));
        assert!(matches!(qm.sites[2], Site::Inherit)); // max pool
        assert!(matches!(qm.sites[3], Site::Inherit)); // global average
        assert!(matches!(qm.sites[4], Site::Affine { .. })); // linear head
        assert_eq!(qm.alphas().len(), 1);

        // Inherited edges reuse the activation's parameters verbatim.
        let eq = qm.edge_quant();
        assert_eq!(eq[2], eq[1]);
        assert_eq!(eq[3], eq[1]);
    }

    #[test]
    fn attach_rejects_unfolded_norms() {
        let m = residual_toy();
        let calib = Tensor::leaf(&[1, 1, 32], vec![0.1; 32], false).unwrap();
        assert!(QatModel::attach(m, &calib).is_err());
    }

    #[test]
    fn clip_percentile_is_nearest_rank() {
        let mut v: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(clip_percentile(&mut v).unwrap(), 999.0);

        let mut v = vec![0.5];
        assert_eq!(clip_percentile(&mut v).unwrap(), 0.5);

        // All-negative pre-activations leave a zero range; the floor holds.
        let mut v = vec![0.0; 50];
        assert_eq!(clip_percentile(&mut v).unwrap(), ALPHA_FLOOR);

        assert!(clip_percentile(&mut vec![]).is_err());
        assert!(clip_percentile(&mut vec![f32::NAN]).is_err());
    }

    #[test]
    fn forward_output_lands_on_the_declared_grid() {
        let mut m = residual_toy();
        train_batch(&mut m, 21, 2);
        let folded = fold_batchnorm(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cal: Vec<f32> = (0..8 * 32).map(|_| rng.random_range(-1.5..1.5)).collect();
        let calib = Tensor::leaf(&[8, 1, 32], cal, false).unwrap();
        let qm = QatModel::attach(folded, &calib).unwrap();

        let xv: Vec<f32> = (0..3 * 32).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = Tensor::leaf(&[3, 1, 32], xv, false).unwrap();
        let y = qm.forward(&x).unwrap();
        let q = *qm.edge_quant().last().unwrap();
        for &v in y.data().iter() {
            let snapped = q.dequantize_one(q.quantize_one(v as f64)) as f32;
            assert!(
                (v - snapped).abs() <= 1e-5 * (1.0 + v.abs()),
                "{v} is off the output grid (scale {})",
                q.scale
            );
        }
    }

    #[test]
    fn attach_only_run_keeps_weights_untouched() {
        let mut m = residual_toy();
        train_batch(&mut m, 31, 2);
        let ws = crate::data::synth::generate(&crate::data::synth::SynthConfig {
            n_subjects: 2,
            seconds: 20.0,
            seed: 3,
            noise: 0.01,
            scalar_only: true,
        })
        .unwrap();
        let (ws, _) = crate::data::prep::build_windows(&ws, 0.256, 16).unwrap();
        let data = to_train_data(&ws, TargetKind::Sbp).unwrap();

        let folded = fold_batchnorm(&m).unwrap();
        let reference: Vec<Vec<f32>> = folded
            .parameters()
            .iter()
            .map(|p| p.data().clone())
            .collect();
        let qm = qat_finetune(&m, &data, &QatConfig { epochs: 0, ..QatConfig::default() }).unwrap();
        let after: Vec<Vec<f32>> = qm
            .model
            .parameters()
            .iter()
            .map(|p| p.data().clone())
            .collect();
        assert_eq!(reference, after);
    }

    #[test]
    fn finetune_moves_weights_and_keeps_clips_positive() {
        let ws = crate::data::synth::generate(&crate::data::synth::SynthConfig {
            n_subjects: 3,
            seconds: 24.0,
            seed: 4,
            noise: 0.02,
            scalar_only: true,
        })
        .unwrap();
        let (ws, _) = crate::data::prep::build_windows(&ws, 0.256, 16).unwrap();
        let data = to_train_data(&ws, TargetKind::Sbp).unwrap();

        let mut g = Graph::new(1, 32);
        let conv = g.push(
            LayerSpec::Conv1d {
                c_in: 1,
                c_out: 6,
                k: 5,
                stride: 1,
                padding: 2,
            },
            vec![INPUT],
        );
        let bn = g.push(LayerSpec::BatchNorm { c: 6 }, vec![conv]);
        let relu = g.push(LayerSpec::Relu, vec![bn]);
        let gap = g.push(LayerSpec::GlobalAvgPool, vec![relu]);
        g.push(
            LayerSpec::Linear {
                in_features: 6,
                out_features: 1,
            },
            vec![gap],
        );
        let mut m = FloatModel::init(g, 7).unwrap();
        // Ranges freeze at calibration, so the float model has to be close
        // to converged before quantization or the grid cannot express it.
        train(&mut m, &data, &TrainConfig { epochs: 12, ..TrainConfig::default() }).unwrap();

        let before = fold_batchnorm(&m).unwrap();
        let qm = qat_finetune(
            &m,
            &data,
            &QatConfig { epochs: 2, ..QatConfig::default() },
        )
        .unwrap();
        let moved = before
            .parameters()
            .iter()
            .zip(qm.model.parameters().iter())
            .any(|(a, b)| *a.data() != *b.data());
        assert!(moved, "fine-tuning never updated a weight");
        for a in qm.alphas() {
            assert!(a.item() >= ALPHA_FLOOR);
        }
    }


    #[test]
    fn quantized_error_tracks_float_error() {
        // Desk-scale version of the degradation bound: quantized MAE within
        // 15 percent of the float model's on a learnable synthetic task.
        let ws = crate::data::synth::generate(&crate::data::synth::SynthConfig {
            n_subjects: 4,
            seconds: 30.0,
            seed: 8,
            noise: 0.01,
            scalar_only: true,
        })
        .unwrap();
        let (ws, _) = crate::data::prep::build_windows(&ws, 0.256, 8).unwrap();
        let data = to_train_data(&ws, TargetKind::Sbp).unwrap();

        let g = build_resnet1d(&ResNetConfig {
            input_len: 32,
            blocks_per_stage: 1,
            base_channels: 4,
            k: 3,
        })
        .unwrap();
        let mut m = FloatModel::init(g, 2).unwrap();
        train(&mut m, &data, &TrainConfig { epochs: 15, ..TrainConfig::default() }).unwrap();
        let float_mae = model::evaluate(&mut m, &ws, TargetKind::Sbp)
            .unwrap()
            .mae_sbp
            .unwrap();

        let qm = qat_finetune(&m, &data, &QatConfig { epochs: 3, ..QatConfig::default() }).unwrap();
        let q_mae = evaluate_quant(&qm, &ws, TargetKind::Sbp)
            .unwrap()
            .mae_sbp
            .unwrap();
        assert!(
            q_mae <= 1.15 * float_mae + 1e-9,
            "quantized {q_mae} vs float {float_mae}"
        );
    }
}
