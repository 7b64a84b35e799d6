//! Executable int8 graphs: the lowered form produced by quantized export
//! and consumed by the interpreter, the memory planner, and the C emitter.
//!
//! An [`IntGraph`] is a flat layer list (last layer is the output) with the
//! affine quantization of every edge baked into fixed-point requantization
//! constants, plus packed i8 weight and i32 bias blobs. Execution touches
//! integers only; the per-edge scales kept alongside are metadata for
//! dequantization and for the float reference simulation.

pub mod emit;
pub mod interp;
pub mod memory;
pub mod serial;
pub mod testgen;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{conv_output_len, Shape, INPUT, MAX_FANIN, MAX_HYPER, MAX_NODES};
use crate::quant::{validate_requant, QuantParams, Requant};

pub use serial::{parse_int_graph, write_int_graph};

/// Accumulators are 32-bit. With int8 codes and zero points both in
/// `[-128, 127]`, every product is at most `255 * 255 = 65025` in
/// magnitude, so a dot product of `REDUCE_MAX` terms plus a bias bounded by
/// `i32::MAX - 65025 * REDUCE_MAX` cannot overflow.
pub const REDUCE_MAX: usize = 1 << 15;
const TERM_MAX: i64 = 255 * 255;

/// Averaging layers sum bare code offsets, at most 255 in magnitude, so
/// their windows get a correspondingly larger bound: `255 * 2^23 < i32::MAX`.
pub const AVG_REDUCE_MAX: usize = 1 << 23;

/// One integer layer kind with its hyperparameters. Weight shapes are
/// implied: `Conv` carries `[c_out, c_in, k]` i8 weights and `[c_out]` i32
/// biases, `Dw` carries `[c, k]` and `[c]`, `Linear` carries
/// `[out_f, in_f]` and `[out_f]`. Everything else is weightless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IntOp {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    /// Depthwise conv: one k-tap filter per channel.
    Dw {
        c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_f: usize,
        out_f: usize,
    },
    /// Elementwise sum of two same-shape series, each requantized onto the
    /// output grid first.
    Add,
    /// Channel concatenation, each input requantized onto the output grid.
    Concat,
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Upsample {
        factor: usize,
    },
    TrimTail {
        len: usize,
    },
    Identity,
    /// Pure grid change: requantize codes onto a new (scale, zero point).
    /// Also the lowering of a standalone ReLU, whose output grid puts the
    /// clamp floor at exactly zero.
    Requant,
}

impl IntOp {
    /// Number of graph inputs the layer consumes.
    fn arity_ok(&self, n: usize) -> bool {
        match self {
            IntOp::Add => n == 2,
            IntOp::Concat => (2..=MAX_FANIN).contains(&n),
            _ => n == 1,
        }
    }

    /// Number of requantization constants the layer carries: one per
    /// arithmetic path onto the output grid, none for passthrough layers.
    fn requant_arity(&self, n_inputs: usize) -> usize {
        match self {
            IntOp::Conv { .. }
            | IntOp::Dw { .. }
            | IntOp::Linear { .. }
            | IntOp::AvgPool { .. }
            | IntOp::GlobalAvgPool
            | IntOp::Requant => 1,
            IntOp::Add | IntOp::Concat => n_inputs,
            IntOp::MaxPool { .. } | IntOp::Upsample { .. } | IntOp::TrimTail { .. } | IntOp::Identity => 0,
        }
    }

    /// Passthrough layers forward codes untouched, so their output grid
    /// must equal their input grid.
    fn is_passthrough(&self) -> bool {
        matches!(
            self,
            IntOp::MaxPool { .. } | IntOp::Upsample { .. } | IntOp::TrimTail { .. } | IntOp::Identity
        )
    }

    /// Weight and bias element counts implied by the op.
    fn param_lens(&self) -> Result<(usize, usize)> {
        let mul = |a: usize, b: usize| -> Result<usize> {
            a.checked_mul(b)
                .ok_or_else(|| Error::Invalid("weight shape overflows".into()))
        };
        match *self {
            IntOp::Conv { c_in, c_out, k, .. } => Ok((mul(mul(c_out, c_in)?, k)?, c_out)),
            IntOp::Dw { c, k, .. } => Ok((mul(c, k)?, c)),
            IntOp::Linear { in_f, out_f } => Ok((mul(out_f, in_f)?, out_f)),
            _ => Ok((0, 0)),
        }
    }

    /// Length of the reduction feeding one output accumulator, used for the
    /// overflow bound. Zero for layers without a dot product.
    fn reduce_len(&self) -> usize {
        match *self {
            IntOp::Conv { c_in, k, .. } => c_in * k,
            IntOp::Dw { k, .. } => k,
            IntOp::Linear { in_f, .. } => in_f,
            _ => 0,
        }
    }
}

/// One executable layer. `inputs` index earlier layers, with
/// [`crate::graph::INPUT`] meaning the graph input. `w_off`/`b_off` are
/// element offsets into the packed blobs; layers must pack in order with no
/// gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntLayer {
    pub op: IntOp,
    pub inputs: Vec<usize>,
    /// One fixed-point multiplier per requantized path (see
    /// `IntOp::requant_arity`).
    pub requant: Vec<Requant>,
    /// Zero point of each consumed edge, same order as `inputs`.
    pub zp_in: Vec<i32>,
    /// Weight zero point; meaningful only for layers with weights.
    pub zp_w: i32,
    /// Zero point of the produced edge.
    pub zp_out: i32,
    /// Scale of the produced edge. Metadata only: dequantization and the
    /// float simulation read it, the integer path never does.
    pub out_scale: f64,
    pub w_off: usize,
    pub w_len: usize,
    pub b_off: usize,
    pub b_len: usize,
}

/// A complete int8 model: layers plus packed parameter blobs and the
/// quantization of the input edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntGraph {
    pub input_channels: usize,
    pub input_len: usize,
    pub input_q: QuantParams,
    pub layers: Vec<IntLayer>,
    #[serde(skip)]
    pub weights: Vec<i8>,
    #[serde(skip)]
    pub biases: Vec<i32>,
}

fn check_q(what: &str, q: QuantParams) -> Result<()> {
    if !(q.scale.is_finite() && q.scale > 0.0) {
        return Err(Error::Invalid(format!("{what}: scale {} not positive and finite", q.scale)));
    }
    if !(-128..=127).contains(&q.zero_point) {
        return Err(Error::Invalid(format!("{what}: zero point {} outside int8", q.zero_point)));
    }
    Ok(())
}

fn check_zp(what: &str, zp: i32) -> Result<()> {
    if !(-128..=127).contains(&zp) {
        return Err(Error::Invalid(format!("{what}: zero point {zp} outside int8")));
    }
    Ok(())
}

impl IntGraph {
    pub fn input_shape(&self) -> Shape {
        Shape::Series {
            c: self.input_channels,
            l: self.input_len,
        }
    }

    /// Quantization of the edge produced by `src` (a layer index or
    /// [`INPUT`]). Only valid on checked graphs.
    pub fn src_q(&self, src: usize) -> QuantParams {
        if src == INPUT {
            self.input_q
        } else {
            QuantParams {
                scale: self.layers[src].out_scale,
                zero_point: self.layers[src].zp_out,
            }
        }
    }

    /// Quantization of the final output edge.
    pub fn output_q(&self) -> QuantParams {
        self.src_q(self.layers.len() - 1)
    }

    /// Structural validation and shape inference, ignoring the parameter
    /// blobs. Returns per-layer output shapes plus the weight and bias
    /// element counts the layers claim, so a parser can size-check blobs
    /// before allocating them.
    pub(crate) fn check_structure(&self) -> Result<(Vec<Shape>, usize, usize)> {
        if self.input_channels == 0 || self.input_len == 0 {
            return Err(Error::Invalid("int graph input must be non-empty".into()));
        }
        check_elems(self.input_shape())?;
        check_q("input", self.input_q)?;
        if self.layers.is_empty() {
            return Err(Error::Invalid("int graph has no layers".into()));
        }
        if self.layers.len() > MAX_NODES {
            return Err(Error::Invalid(format!(
                "int graph has {} layers, limit is {MAX_NODES}",
                self.layers.len()
            )));
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut w_total = 0usize;
        let mut b_total = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.op.arity_ok(layer.inputs.len()) {
                return Err(Error::Invalid(format!(
                    "layer {i} ({:?}): wrong input count {}",
                    layer.op,
                    layer.inputs.len()
                )));
            }
            let mut ins: Vec<Shape> = Vec::with_capacity(layer.inputs.len());
            for &src in &layer.inputs {
                if src == INPUT {
                    ins.push(self.input_shape());
                } else if src < i {
                    ins.push(shapes[src]);
                } else {
                    return Err(Error::Invalid(format!(
                        "layer {i} reads layer {src}, which is not an earlier layer"
                    )));
                }
            }
            let out = layer_output_shape(i, &layer.op, &ins)?;
            check_elems(out)?;

            if layer.zp_in.len() != layer.inputs.len() {
                return Err(Error::Invalid(format!(
                    "layer {i}: {} input zero points for {} inputs",
                    layer.zp_in.len(),
                    layer.inputs.len()
                )));
            }
            for (j, &src) in layer.inputs.iter().enumerate() {
                check_zp(&format!("layer {i} input {j}"), layer.zp_in[j])?;
                let expect = self.src_q(src).zero_point;
                if layer.zp_in[j] != expect {
                    return Err(Error::Invalid(format!(
                        "layer {i} input {j}: zero point {} but the producing edge has {expect}",
                        layer.zp_in[j]
                    )));
                }
            }
            check_zp(&format!("layer {i} weights"), layer.zp_w)?;
            check_q(
                &format!("layer {i} output"),
                QuantParams {
                    scale: layer.out_scale,
                    zero_point: layer.zp_out,
                },
            )?;

            let want_rq = layer.op.requant_arity(layer.inputs.len());
            if layer.requant.len() != want_rq {
                return Err(Error::Invalid(format!(
                    "layer {i} ({:?}): {} requant constants, expected {want_rq}",
                    layer.op,
                    layer.requant.len()
                )));
            }
            for &r in &layer.requant {
                validate_requant(r)?;
            }
            if layer.op.is_passthrough() {
                let src_q = self.src_q(layer.inputs[0]);
                if layer.zp_out != src_q.zero_point || layer.out_scale != src_q.scale {
                    return Err(Error::Invalid(format!(
                        "layer {i} ({:?}): passthrough layers must keep the input grid",
                        layer.op
                    )));
                }
            }

            let reduce = layer.op.reduce_len();
            if reduce > REDUCE_MAX {
                return Err(Error::Quant(format!(
                    "layer {i}: reduction of {reduce} terms exceeds {REDUCE_MAX}; \
                     a 32-bit accumulator could overflow"
                )));
            }
            let avg_len = match (layer.op, ins[0]) {
                (IntOp::AvgPool { k, .. }, _) => k,
                (IntOp::GlobalAvgPool, Shape::Series { l, .. }) => l,
                _ => 0,
            };
            if avg_len > AVG_REDUCE_MAX {
                return Err(Error::Quant(format!(
                    "layer {i}: averaging window of {avg_len} exceeds {AVG_REDUCE_MAX}; \
                     a 32-bit accumulator could overflow"
                )));
            }

            let (w_len, b_len) = layer.op.param_lens()?;
            if layer.w_off != w_total || layer.w_len != w_len || layer.b_off != b_total || layer.b_len != b_len {
                return Err(Error::Invalid(format!(
                    "layer {i}: parameter ranges must pack in order \
                     (weights at {w_total}+{w_len}, biases at {b_total}+{b_len})"
                )));
            }
            w_total += w_len;
            b_total += b_len;
            shapes.push(out);
        }
        let mut used = vec![false; self.layers.len()];
        for layer in &self.layers {
            for &src in &layer.inputs {
                if src != INPUT {
                    used[src] = true;
                }
            }
        }
        if let Some(i) = used[..self.layers.len() - 1].iter().position(|&u| !u) {
            return Err(Error::Invalid(format!("layer {i} feeds nothing")));
        }
        Ok((shapes, w_total, b_total))
    }

    /// Full validation: structure, blob sizes, and the accumulator overflow
    /// bound including actual bias magnitudes. Returns per-layer output
    /// shapes.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let (shapes, w_total, b_total) = self.check_structure()?;
        if self.weights.len() != w_total || self.biases.len() != b_total {
            return Err(Error::Invalid(format!(
                "blob sizes ({} weights, {} biases) disagree with layers ({w_total}, {b_total})",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let reduce = layer.op.reduce_len();
            if reduce == 0 {
                continue;
            }
            let bias_max = self.biases[layer.b_off..layer.b_off + layer.b_len]
                .iter()
                .map(|&b| (b as i64).abs())
                .max()
                .unwrap_or(0);
            let worst = TERM_MAX * reduce as i64 + bias_max;
            if worst > i32::MAX as i64 {
                return Err(Error::Quant(format!(
                    "layer {i}: worst-case accumulator {worst} exceeds i32 \
                     ({reduce} terms of at most {TERM_MAX} plus bias {bias_max})"
                )));
            }
        }
        Ok(shapes)
    }

    /// Per-layer output shapes of a validated graph.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        self.validate()
    }
}

fn check_elems(s: Shape) -> Result<()> {
    let elems = match s {
        Shape::Series { c, l } => c.checked_mul(l),
        Shape::Vector { f } => Some(f),
    };
    match elems {
        Some(n) if (1..=crate::graph::MAX_SHAPE_ELEMS).contains(&n) => Ok(()),
        _ => Err(Error::Invalid(format!("shape {s:?} is empty or too large"))),
    }
}

pub(crate) fn shape_elems(s: Shape) -> usize {
    match s {
        Shape::Series { c, l } => c * l,
        Shape::Vector { f } => f,
    }
}

fn layer_output_shape(i: usize, op: &IntOp, ins: &[Shape]) -> Result<Shape> {
    let series = |s: Shape| -> Result<(usize, usize)> {
        match s {
            Shape::Series { c, l } => Ok((c, l)),
            Shape::Vector { .. } => Err(Error::Invalid(format!(
                "layer {i} ({op:?}) needs a series input, got a vector"
            ))),
        }
    };
    let hyper = |vals: &[usize]| -> Result<()> {
        if vals.iter().any(|&v| v > MAX_HYPER) {
            return Err(Error::Invalid(format!("layer {i}: hyperparameter exceeds {MAX_HYPER}")));
        }
        Ok(())
    };
    match *op {
        IntOp::Conv {
            c_in,
            c_out,
            k,
            stride,
            padding,
        } => {
            let (c, l) = series(ins[0])?;
            if c != c_in {
                return Err(Error::Invalid(format!(
                    "layer {i}: declared c_in {c_in} but input has {c} channels"
                )));
            }
            if c_out == 0 || k == 0 {
                return Err(Error::Invalid(format!("layer {i}: zero c_out or k")));
            }
            hyper(&[k, stride, padding])?;
            Ok(Shape::Series {
                c: c_out,
                l: conv_output_len(l, k, stride, padding)?,
            })
        }
        IntOp::Dw { c, k, stride, padding } => {
            let (ci, l) = series(ins[0])?;
            if ci != c {
                return Err(Error::Invalid(format!(
                    "layer {i}: depthwise over {c} channels applied to {ci}"
                )));
            }
            if k == 0 {
                return Err(Error::Invalid(format!("layer {i}: zero k")));
            }
            hyper(&[k, stride, padding])?;
            Ok(Shape::Series {
                c,
                l: conv_output_len(l, k, stride, padding)?,
            })
        }
        IntOp::Linear { in_f, out_f } => {
            let f = match ins[0] {
                Shape::Vector { f } => f,
                Shape::Series { .. } => {
                    return Err(Error::Invalid(format!(
                        "layer {i}: linear needs a vector input; pool to one first"
                    )))
                }
            };
            if f != in_f {
                return Err(Error::Invalid(format!(
                    "layer {i}: linear expects {in_f} features, got {f}"
                )));
            }
            if out_f == 0 {
                return Err(Error::Invalid(format!("layer {i}: zero out_f")));
            }
            Ok(Shape::Vector { f: out_f })
        }
        IntOp::Add => {
            let a = series(ins[0])?;
            let b = series(ins[1])?;
            if a != b {
                return Err(Error::Invalid(format!(
                    "layer {i}: add inputs disagree, {a:?} vs {b:?}"
                )));
            }
            Ok(ins[0])
        }
        IntOp::Concat => {
            let (mut c_total, l0) = series(ins[0])?;
            for &s in &ins[1..] {
                let (c, l) = series(s)?;
                if l != l0 {
                    return Err(Error::Invalid(format!(
                        "layer {i}: concat lengths disagree, {l0} vs {l}"
                    )));
                }
                c_total += c;
            }
            Ok(Shape::Series { c: c_total, l: l0 })
        }
        IntOp::MaxPool { k, stride } | IntOp::AvgPool { k, stride } => {
            let (c, l) = series(ins[0])?;
            if k == 0 || stride == 0 {
                return Err(Error::Invalid(format!("layer {i}: zero pool size or stride")));
            }
            hyper(&[k, stride])?;
            if l < k {
                return Err(Error::Invalid(format!(
                    "layer {i}: pool window {k} larger than length {l}"
                )));
            }
            Ok(Shape::Series {
                c,
                l: (l - k) / stride + 1,
            })
        }
        IntOp::GlobalAvgPool => {
            let (c, _) = series(ins[0])?;
            Ok(Shape::Vector { f: c })
        }
        IntOp::Upsample { factor } => {
            let (c, l) = series(ins[0])?;
            if factor == 0 {
                return Err(Error::Invalid(format!("layer {i}: zero upsample factor")));
            }
            hyper(&[factor])?;
            let l_out = l
                .checked_mul(factor)
                .ok_or_else(|| Error::Invalid(format!("layer {i}: upsample overflows")))?;
            Ok(Shape::Series { c, l: l_out })
        }
        IntOp::TrimTail { len } => {
            let (c, l) = series(ins[0])?;
            if len == 0 || len > l {
                return Err(Error::Invalid(format!("layer {i}: cannot trim length {l} to {len}")));
            }
            Ok(Shape::Series { c, l: len })
        }
        IntOp::Identity | IntOp::Requant => Ok(ins[0]),
    }
}
