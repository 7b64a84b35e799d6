//! Float models: a graph plus its parameters, with forward passes for
//! training and evaluation, seeded initialization, mini-batch training, and
//! checkpoint IO. Targets are scaled into roughly unit range for training
//! and unscaled for reporting.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::prep::{extract_labels, mae, WindowSet};
use crate::error::{Error, Result};
use crate::graph::serial::{self, NamedTensor};
use crate::graph::{Graph, LayerSpec};
use crate::tensor::{backward, ops, Adam, Tensor, Value};

/// mmHg are divided by this for training and multiplied back for reports.
pub const TARGET_SCALE: f32 = 200.0;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Parameters of one node, if any. Running stats are training-time buffers,
/// not trainable parameters.
#[derive(Debug, Clone)]
pub enum NodeParams {
    Conv {
        w: Value<f32>,
        b: Value<f32>,
    },
    Dw {
        dw_w: Value<f32>,
        dw_b: Value<f32>,
        pw_w: Value<f32>,
        pw_b: Value<f32>,
    },
    Bn {
        gamma: Value<f32>,
        beta: Value<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
    },
    Linear {
        w: Value<f32>,
        b: Value<f32>,
    },
    None,
}

#[derive(Debug, Clone)]
pub struct FloatModel {
    pub graph: Graph,
    pub params: Vec<NodeParams>,
}

pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Value<f32>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::leaf(shape, data, true)
}

pub(crate) fn zeros(shape: &[usize]) -> Result<Value<f32>> {
    Tensor::leaf(shape, vec![0.0; shape.iter().product()], true)
}

/// Fresh leaf with the same shape and data; the copy trains independently.
pub(crate) fn clone_leaf(v: &Value<f32>) -> Result<Value<f32>> {
    Tensor::leaf(v.shape(), v.data().clone(), true)
}

pub(crate) fn clone_params(p: &NodeParams) -> Result<NodeParams> {
    Ok(match p {
        NodeParams::Conv { w, b } => NodeParams::Conv {
            w: clone_leaf(w)?,
            b: clone_leaf(b)?,
        },
        NodeParams::Linear { w, b } => NodeParams::Linear {
            w: clone_leaf(w)?,
            b: clone_leaf(b)?,
        },
        NodeParams::Dw {
            dw_w,
            dw_b,
            pw_w,
            pw_b,
        } => NodeParams::Dw {
            dw_w: clone_leaf(dw_w)?,
            dw_b: clone_leaf(dw_b)?,
            pw_w: clone_leaf(pw_w)?,
            pw_b: clone_leaf(pw_b)?,
        },
        NodeParams::Bn {
            gamma,
            beta,
            running_mean,
            running_var,
        } => NodeParams::Bn {
            gamma: clone_leaf(gamma)?,
            beta: clone_leaf(beta)?,
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
        },
        NodeParams::None => NodeParams::None,
    })
}

impl FloatModel {
    /// Fan-in-scaled uniform init for weights, zero biases, identity batch
    /// norm. Deterministic per seed.
    pub fn init(graph: Graph, seed: u64) -> Result<FloatModel> {
        graph.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            params.push(match node.spec {
                LayerSpec::Conv1d { c_in, c_out, k, .. } => NodeParams::Conv {
                    w: kaiming(&mut rng, &[c_out, c_in, k], c_in * k)?,
                    b: zeros(&[c_out])?,
                },
                LayerSpec::DwBlock { c_in, c_out, k, .. } => NodeParams::Dw {
                    dw_w: kaiming(&mut rng, &[c_in, 1, k], k)?,
                    dw_b: zeros(&[c_in])?,
                    pw_w: kaiming(&mut rng, &[c_out, c_in, 1], c_in)?,
                    pw_b: zeros(&[c_out])?,
                },
                LayerSpec::BatchNorm { c } => NodeParams::Bn {
                    gamma: Tensor::leaf(&[c], vec![1.0; c], true)?,
                    beta: zeros(&[c])?,
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => NodeParams::Linear {
                    w: kaiming(&mut rng, &[out_features, in_features], in_features)?,
                    b: zeros(&[out_features])?,
                },
                _ => NodeParams::None,
            });
        }
        Ok(FloatModel { graph, params })
    }

    /// Trainable parameters in graph order.
    pub fn parameters(&self) -> Vec<Value<f32>> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                NodeParams::Conv { w, b } | NodeParams::Linear { w, b } => {
                    out.push(w.clone());
                    out.push(b.clone());
                }
                NodeParams::Dw {
                    dw_w,
                    dw_b,
                    pw_w,
                    pw_b,
                } => out.extend([dw_w.clone(), dw_b.clone(), pw_w.clone(), pw_b.clone()]),
                NodeParams::Bn { gamma, beta, .. } => {
                    out.push(gamma.clone());
                    out.push(beta.clone());
                }
                NodeParams::None => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.parameters().iter().map(|p| p.len() as u64).sum()
    }

    /// One forward pass over a `[n, c, l]` batch. Training mode uses batch
    /// statistics in batch norm and updates the running buffers.
    pub fn forward(&mut self, x: &Value<f32>, training: bool) -> Result<Value<f32>> {
        if x.shape().len() != 3
            || x.shape()[1] != self.graph.input_channels
            || x.shape()[2] != self.graph.input_len
        {
            return Err(Error::Shape(format!(
                "model expects [n, {}, {}], got {:?}",
                self.graph.input_channels,
                self.graph.input_len,
                x.shape()
            )));
        }
        let mut outs: Vec<Value<f32>> = Vec::with_capacity(self.graph.nodes.len());
        for i in 0..self.graph.nodes.len() {
            let ins: Vec<Value<f32>> = self.graph.nodes[i]
                .inputs
                .iter()
                .map(|&src| {
                    if src == crate::graph::INPUT {
                        x.clone()
                    } else {
                        outs[src].clone()
                    }
                })
                .collect();
            outs.push(self.eval_node(i, &ins, training)?);
        }
        Ok(outs.pop().expect("graphs are non-empty"))
    }

    /// Apply node `i`'s layer to already-resolved inputs. Exposed within the
    /// crate so the architecture search can walk graphs its own way.
    pub(crate) fn eval_node(
        &mut self,
        i: usize,
        ins: &[Value<f32>],
        training: bool,
    ) -> Result<Value<f32>> {
        let node = self.graph.nodes[i].clone();
        let a = ins[0].clone();
        let y = match (&node.spec, &self.params[i]) {
                (LayerSpec::Conv1d { stride, padding, .. }, NodeParams::Conv { w, b }) => {
                    ops::conv1d(&a, w, Some(b), *stride, *padding)?
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
                    let mid = ops::depthwise_conv1d(&a, dw_w, Some(dw_b), *stride, *padding)?;
                    ops::conv1d(&mid, pw_w, Some(pw_b), 1, 0)?
                }
                (LayerSpec::BatchNorm { .. }, NodeParams::Bn { gamma, beta, .. }) => {
                    if training {
                        let (y, mean, var) =
                            ops::batchnorm_train(&a, gamma, beta, BN_EPS)?;
                        let NodeParams::Bn {
                            running_mean,
                            running_var,
                            ..
                        } = &mut self.params[i]
                        else {
                            unreachable!()
                        };
                        for (r, m) in running_mean.iter_mut().zip(&mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                        }
                        for (r, v) in running_var.iter_mut().zip(&var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                        }
                        y
                    } else {
                        let NodeParams::Bn {
                            running_mean,
                            running_var,
                            ..
                        } = &self.params[i]
                        else {
                            unreachable!()
                        };
                        ops::batchnorm_eval(&a, gamma, beta, running_mean, running_var, BN_EPS)?
                    }
                }
                (LayerSpec::Relu, _) => ops::relu(&a)?,
                (LayerSpec::Identity, _) => a,
                (LayerSpec::MaxPool { k, stride }, _) => ops::maxpool1d(&a, *k, *stride)?,
                (LayerSpec::AvgPool { k, stride }, _) => ops::avgpool1d(&a, *k, *stride)?,
                (LayerSpec::Upsample { factor }, _) => ops::upsample_nearest(&a, *factor)?,
                (LayerSpec::Add, _) => ops::add(&a, &ins[1])?,
                (LayerSpec::Concat, _) => ops::concat_channels(ins)?,
                (LayerSpec::Linear { .. }, NodeParams::Linear { w, b }) => {
                    ops::linear(&a, w, Some(b))?
                }
                (LayerSpec::GlobalAvgPool, _) => ops::global_avg_pool(&a)?,
                (LayerSpec::TrimTail { len }, _) => ops::trim_tail(&a, *len)?,
                (spec, params) => {
                    return Err(Error::Invalid(format!(
                        "node {i}: spec {spec:?} does not match params {params:?}"
                    )))
                }
            };
        Ok(y)
    }

    // ── checkpoint IO ────────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        fn push(tensors: &mut Vec<NamedTensor>, name: String, v: &Value<f32>) {
            tensors.push(NamedTensor::new(name, v.shape().to_vec(), v.data().clone()));
        }
        let mut tensors = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            match p {
                NodeParams::Conv { w, b } | NodeParams::Linear { w, b } => {
                    push(&mut tensors, format!("n{i}.w"), w);
                    push(&mut tensors, format!("n{i}.b"), b);
                }
                NodeParams::Dw {
                    dw_w,
                    dw_b,
                    pw_w,
                    pw_b,
                } => {
                    push(&mut tensors, format!("n{i}.dw_w"), dw_w);
                    push(&mut tensors, format!("n{i}.dw_b"), dw_b);
                    push(&mut tensors, format!("n{i}.pw_w"), pw_w);
                    push(&mut tensors, format!("n{i}.pw_b"), pw_b);
                }
                NodeParams::Bn {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    push(&mut tensors, format!("n{i}.gamma"), gamma);
                    push(&mut tensors, format!("n{i}.beta"), beta);
                    tensors.push(NamedTensor::new(
                        format!("n{i}.running_mean"),
                        vec![running_mean.len()],
                        running_mean.clone(),
                    ));
                    tensors.push(NamedTensor::new(
                        format!("n{i}.running_var"),
                        vec![running_var.len()],
                        running_var.clone(),
                    ));
                }
                NodeParams::None => {}
            }
        }
        serial::write_checkpoint(&self.graph, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FloatModel> {
        let ckpt = serial::parse_checkpoint(bytes)?;
        let lookup = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = ckpt
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Parse(format!("checkpoint is missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Parse(format!(
                    "tensor {name}: shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        let leaf = |name: &str, shape: &[usize]| -> Result<Value<f32>> {
            Tensor::leaf(shape, lookup(name, shape)?, true)
        };
        let mut params = Vec::with_capacity(ckpt.graph.nodes.len());
        for (i, node) in ckpt.graph.nodes.iter().enumerate() {
            params.push(match node.spec {
                LayerSpec::Conv1d { c_in, c_out, k, .. } => NodeParams::Conv {
                    w: leaf(&format!("n{i}.w"), &[c_out, c_in, k])?,
                    b: leaf(&format!("n{i}.b"), &[c_out])?,
                },
                LayerSpec::DwBlock { c_in, c_out, k, .. } => NodeParams::Dw {
                    dw_w: leaf(&format!("n{i}.dw_w"), &[c_in, 1, k])?,
                    dw_b: leaf(&format!("n{i}.dw_b"), &[c_in])?,
                    pw_w: leaf(&format!("n{i}.pw_w"), &[c_out, c_in, 1])?,
                    pw_b: leaf(&format!("n{i}.pw_b"), &[c_out])?,
                },
                LayerSpec::BatchNorm { c } => NodeParams::Bn {
                    gamma: leaf(&format!("n{i}.gamma"), &[c])?,
                    beta: leaf(&format!("n{i}.beta"), &[c])?,
                    running_mean: lookup(&format!("n{i}.running_mean"), &[c])?,
                    running_var: lookup(&format!("n{i}.running_var"), &[c])?,
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => NodeParams::Linear {
                    w: leaf(&format!("n{i}.w"), &[out_features, in_features])?,
                    b: leaf(&format!("n{i}.b"), &[out_features])?,
                },
                _ => NodeParams::None,
            });
        }
        Ok(FloatModel {
            graph: ckpt.graph,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<FloatModel> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

// ── training data ──────────────────────────────────────────────────────────

/// Which quantity the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Sbp,
    Dbp,
    /// Full pressure waveform, trimmed to the model's output length.
    Abp { len: usize },
}

#[derive(Debug, Clone)]
pub enum Target {
    /// One value per example, training-scaled.
    Scalar(Vec<f32>),
    /// `[n, 1, len]` series, training-scaled.
    Series { len: usize, y: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    /// `[n, c, l]` inputs.
    pub x: Vec<f32>,
    pub target: Target,
}

/// Assemble training examples from prepared windows. Targets are divided by
/// [`TARGET_SCALE`]; series targets additionally require the window set to
/// carry ABP and are trimmed to the requested length.
pub fn to_train_data(ws: &WindowSet, kind: TargetKind) -> Result<TrainData> {
    if ws.is_empty() {
        return Err(Error::Invalid("empty window set".into()));
    }
    let target = match kind {
        TargetKind::Sbp => {
            Target::Scalar(ws.sbp.iter().map(|v| v / TARGET_SCALE).collect())
        }
        TargetKind::Dbp => {
            Target::Scalar(ws.dbp.iter().map(|v| v / TARGET_SCALE).collect())
        }
        TargetKind::Abp { len } => {
            let abp = ws.abp.as_ref().ok_or_else(|| {
                Error::Invalid(
                    "signal-to-signal training needs waveform labels, but this data \
                     only has scalar labels"
                        .into(),
                )
            })?;
            if len == 0 || len > ws.window_len {
                return Err(Error::Invalid(format!(
                    "series target of {len} samples from {}-sample windows",
                    ws.window_len
                )));
            }
            let mut y = Vec::with_capacity(ws.len() * len);
            for i in 0..ws.len() {
                let w = &abp[i * ws.window_len..i * ws.window_len + len];
                y.extend(w.iter().map(|v| v / TARGET_SCALE));
            }
            Target::Series { len, y }
        }
    };
    Ok(TrainData {
        n: ws.len(),
        c: 1,
        l: ws.window_len,
        x: ws.x.clone(),
        target,
    })
}

impl TrainData {
    pub(crate) fn batch(&self, idx: &[usize]) -> Result<(Value<f32>, Value<f32>)> {
        let b = idx.len();
        let mut x = Vec::with_capacity(b * self.c * self.l);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.c * self.l..(i + 1) * self.c * self.l]);
        }
        let x = Tensor::leaf(&[b, self.c, self.l], x, false)?;
        let y = match &self.target {
            Target::Scalar(vals) => {
                let data = idx.iter().map(|&i| vals[i]).collect();
                Tensor::constant(&[b, 1], data)?
            }
            Target::Series { len, y } => {
                let mut data = Vec::with_capacity(b * len);
                for &i in idx {
                    data.extend_from_slice(&y[i * len..(i + 1) * len]);
                }
                Tensor::constant(&[b, 1, *len], data)?
            }
        };
        Ok((x, y))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Mini-batch training against squared error. Returns the mean loss per
/// epoch. Batch order reshuffles every epoch from the seed; a non-finite
/// loss aborts with an error.
pub fn train(model: &mut FloatModel, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(model.parameters(), cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let pred = model.forward(&x, true)?;
            let loss = ops::mse(&pred, &y)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("training loss became {lv}")));
            }
            epoch_loss += lv;
            batches += 1;
            backward(&loss)?;
            opt.step()?;
            opt.zero_grad();
        }
        log.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(log)
}

// ── evaluation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mae_sbp: Option<f64>,
    pub mae_dbp: Option<f64>,
}

/// Mean absolute error in mmHg on a window set. Scalar models report the
/// one quantity they predict; waveform models report both, taking the
/// predicted waveform's extremes per window.
pub fn evaluate(model: &mut FloatModel, ws: &WindowSet, kind: TargetKind) -> Result<EvalReport> {
    evaluate_with(|x| model.forward(x, false), ws, kind)
}

/// [`evaluate`] over any forward function, so quantization-simulating
/// models score with the same protocol.
pub fn evaluate_with<F>(mut forward: F, ws: &WindowSet, kind: TargetKind) -> Result<EvalReport>
where
    F: FnMut(&Value<f32>) -> Result<Value<f32>>,
{
    if ws.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty window set".into()));
    }
    let mut pred_sbp = Vec::with_capacity(ws.len());
    let mut pred_dbp = Vec::with_capacity(ws.len());
    let idx: Vec<usize> = (0..ws.len()).collect();
    for chunk in idx.chunks(64) {
        let mut x = Vec::with_capacity(chunk.len() * ws.window_len);
        for &i in chunk {
            x.extend_from_slice(ws.window(i));
        }
        let x = Tensor::leaf(&[chunk.len(), 1, ws.window_len], x, false)?;
        let out = forward(&x)?;
        let od = out.data();
        match kind {
            TargetKind::Sbp | TargetKind::Dbp => {
                if out.shape() != [chunk.len(), 1] {
                    return Err(Error::Shape(format!(
                        "scalar evaluation needs [n, 1] outputs, got {:?}",
                        out.shape()
                    )));
                }
                for &v in od.iter() {
                    pred_sbp.push(v * TARGET_SCALE);
                }
            }
            TargetKind::Abp { len } => {
                if out.shape() != [chunk.len(), 1, len] {
                    return Err(Error::Shape(format!(
                        "series evaluation needs [n, 1, {len}] outputs, got {:?}",
                        out.shape()
                    )));
                }
                for w in od.chunks_exact(len) {
                    let scaled: Vec<f32> = w.iter().map(|v| v * TARGET_SCALE).collect();
                    let (s, d) = extract_labels(&scaled);
                    pred_sbp.push(s);
                    pred_dbp.push(d);
                }
            }
        }
    }
    Ok(match kind {
        TargetKind::Sbp => EvalReport {
            mae_sbp: Some(mae(&pred_sbp, &ws.sbp)?),
            mae_dbp: None,
        },
        TargetKind::Dbp => EvalReport {
            mae_sbp: None,
            mae_dbp: Some(mae(&pred_sbp, &ws.dbp)?),
        },
        TargetKind::Abp { .. } => EvalReport {
            mae_sbp: Some(mae(&pred_sbp, &ws.sbp)?),
            mae_dbp: Some(mae(&pred_dbp, &ws.dbp)?),
        },
    })
}
