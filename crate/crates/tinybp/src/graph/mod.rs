//! Architecture descriptions: a flat DAG of 1-D layers with static shape
//! inference, parameter and MAC accounting, and a binary checkpoint
//! container. Graphs are pure structure; weights live in `crate::model`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod build;
pub mod serial;
pub mod testgen;

pub use build::{build_resnet1d, build_unet1d, ResNetConfig, UNetConfig};

/// Sentinel node index meaning "the graph input".
pub const INPUT: usize = usize::MAX;

/// Upper bounds on activation size, node count, per-node fan-in, and layer
/// hyperparameters (kernel, stride, padding, upsample factor). Generous for
/// real models; they exist so untrusted graph descriptions cannot drive
/// later size arithmetic into overflow.
pub const MAX_SHAPE_ELEMS: usize = 1 << 28;
pub const MAX_NODES: usize = 1 << 16;
pub const MAX_FANIN: usize = 64;
pub const MAX_HYPER: usize = 1 << 16;

fn check_shape(s: Shape) -> Result<()> {
    let elems = match s {
        Shape::Series { c, l } => c.checked_mul(l),
        Shape::Vector { f } => Some(f),
    };
    match elems {
        Some(n) if (1..=MAX_SHAPE_ELEMS).contains(&n) => Ok(()),
        _ => Err(Error::Invalid(format!(
            "shape {s:?} is empty or exceeds {MAX_SHAPE_ELEMS} elements"
        ))),
    }
}

fn check_hyper(i: usize, vals: &[usize]) -> Result<()> {
    if vals.iter().any(|&v| v > MAX_HYPER) {
        return Err(Error::Invalid(format!(
            "node {i}: hyperparameter exceeds {MAX_HYPER}"
        )));
    }
    Ok(())
}

/// Static tensor shape without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Channels x length, as produced by convolutional layers.
    Series { c: usize, l: usize },
    /// Flat feature vector, as produced by pooling-to-vector or linear layers.
    Vector { f: usize },
}

/// One layer kind with its hyperparameters. Parameter shapes are implied:
/// convolutions carry `[c_out, c_in, k]` weights and `[c_out]` biases, the
/// depthwise-separable block carries `[c_in, 1, k]` + `[c_in]` for the
/// depthwise stage and `[c_out, c_in, 1]` + `[c_out]` for the pointwise
/// stage, batch norm carries `[c]` gamma/beta plus running mean/var buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Conv1d {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    /// Depthwise conv (k, per-channel) followed by a pointwise 1x1 conv.
    DwBlock {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        c: usize,
    },
    Relu,
    Identity,
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    /// Elementwise sum of two same-shape series.
    Add,
    /// Channel concatenation of two or more same-length series.
    Concat,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Mean over length per channel: `[C, L] -> [C]`.
    GlobalAvgPool,
    /// Drop trailing samples to reach `len`; adapter for odd input lengths.
    TrimTail {
        len: usize,
    },
}

impl LayerSpec {
    /// Number of inputs the layer consumes.
    pub fn arity(&self) -> ArityReq {
        match self {
            LayerSpec::Add => ArityReq::Exactly(2),
            LayerSpec::Concat => ArityReq::AtLeast(2),
            _ => ArityReq::Exactly(1),
        }
    }

    /// Learnable parameter count. Batch norm counts gamma and beta; running
    /// stats are buffers, not parameters. Saturating so untrusted graph
    /// descriptions cannot overflow the sum.
    pub fn param_count(&self) -> u64 {
        let wide: u128 = match *self {
            LayerSpec::Conv1d { c_in, c_out, k, .. } => {
                c_out as u128 * (c_in as u128 * k as u128 + 1)
            }
            LayerSpec::DwBlock { c_in, c_out, k, .. } => {
                c_in as u128 * (k as u128 + 1) + c_out as u128 * (c_in as u128 + 1)
            }
            LayerSpec::BatchNorm { c } => 2 * c as u128,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => out_features as u128 * (in_features as u128 + 1),
            _ => 0,
        };
        wide.min(u64::MAX as u128) as u64
    }

    /// Multiply-accumulate count for one (batch-1) forward pass given the
    /// layer's output shape. Only matrix-product layers count; elementwise
    /// and pooling work is free by this metric.
    pub fn mac_count(&self, out: Shape) -> u64 {
        let wide: u128 = match (*self, out) {
            (LayerSpec::Conv1d { c_in, k, .. }, Shape::Series { c, l }) => {
                c as u128 * l as u128 * c_in as u128 * k as u128
            }
            (LayerSpec::DwBlock { c_in, k, .. }, Shape::Series { c, l }) => {
                // Depthwise produces l samples for each of the c_in
                // channels, then the pointwise stage mixes channels.
                c_in as u128 * l as u128 * k as u128 + c as u128 * l as u128 * c_in as u128
            }
            (
                LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                _,
            ) => out_features as u128 * in_features as u128,
            _ => 0,
        };
        wide.min(u64::MAX as u128) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArityReq {
    Exactly(usize),
    AtLeast(usize),
}

impl ArityReq {
    pub fn accepts(&self, n: usize) -> bool {
        match *self {
            ArityReq::Exactly(k) => n == k,
            ArityReq::AtLeast(k) => n >= k,
        }
    }
}

/// One node: a layer applied to the outputs of earlier nodes (or the graph
/// input via [`INPUT`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
}

impl Node {
    pub fn new(spec: LayerSpec, inputs: Vec<usize>) -> Self {
        Node { spec, inputs }
    }
}

/// A topologically ordered DAG. The last node is the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub input_channels: usize,
    pub input_len: usize,
    pub nodes: Vec<Node>,
}

pub fn conv_output_len(l: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    crate::tensor::ops::conv_out_len(l, k, stride, padding)
}

impl Graph {
    pub fn new(input_channels: usize, input_len: usize) -> Self {
        Graph {
            input_channels,
            input_len,
            nodes: Vec::new(),
        }
    }

    /// Append a node and return its index.
    pub fn push(&mut self, spec: LayerSpec, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node::new(spec, inputs));
        self.nodes.len() - 1
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Series {
            c: self.input_channels,
            l: self.input_len,
        }
    }

    /// Shape of each node's output, checking arity, topological order, and
    /// every layer's structural constraints.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        if self.input_channels == 0 || self.input_len == 0 {
            return Err(Error::Invalid("graph input must be non-empty".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Invalid("graph has no nodes".into()));
        }
        if self.nodes.len() > MAX_NODES {
            return Err(Error::Invalid(format!(
                "graph has {} nodes, limit is {MAX_NODES}",
                self.nodes.len()
            )));
        }
        check_shape(self.input_shape())?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.spec.arity().accepts(node.inputs.len()) || node.inputs.len() > MAX_FANIN {
                return Err(Error::Invalid(format!(
                    "node {i} ({:?}): wrong input count {}",
                    node.spec,
                    node.inputs.len()
                )));
            }
            let mut ins: Vec<Shape> = Vec::with_capacity(node.inputs.len());
            for &src in &node.inputs {
                if src == INPUT {
                    ins.push(self.input_shape());
                } else if src < i {
                    ins.push(shapes[src]);
                } else {
                    return Err(Error::Invalid(format!(
                        "node {i} reads node {src}, which is not an earlier node"
                    )));
                }
            }
            let out = self.node_output_shape(i, &node.spec, &ins)?;
            check_shape(out)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn node_output_shape(&self, i: usize, spec: &LayerSpec, ins: &[Shape]) -> Result<Shape> {
        let series = |s: Shape| -> Result<(usize, usize)> {
            match s {
                Shape::Series { c, l } => Ok((c, l)),
                Shape::Vector { .. } => Err(Error::Invalid(format!(
                    "node {i} ({spec:?}) needs a series input, got a vector"
                ))),
            }
        };
        match *spec {
            LayerSpec::Conv1d {
                c_in,
                c_out,
                k,
                stride,
                padding,
            }
            | LayerSpec::DwBlock {
                c_in,
                c_out,
                k,
                stride,
                padding,
            } => {
                let (c, l) = series(ins[0])?;
                if c != c_in {
                    return Err(Error::Invalid(format!(
                        "node {i}: declared c_in {c_in} but input has {c} channels"
                    )));
                }
                if c_out == 0 || k == 0 {
                    return Err(Error::Invalid(format!("node {i}: zero c_out or k")));
                }
                check_hyper(i, &[k, stride, padding])?;
                let l_out = conv_output_len(l, k, stride, padding)?;
                Ok(Shape::Series { c: c_out, l: l_out })
            }
            LayerSpec::BatchNorm { c } => {
                let (ci, l) = series(ins[0])?;
                if ci != c {
                    return Err(Error::Invalid(format!(
                        "node {i}: batch norm over {c} channels applied to {ci}"
                    )));
                }
                Ok(Shape::Series { c, l })
            }
            LayerSpec::Relu | LayerSpec::Identity => Ok(ins[0]),
            LayerSpec::MaxPool { k, stride } | LayerSpec::AvgPool { k, stride } => {
                let (c, l) = series(ins[0])?;
                if k == 0 || stride == 0 {
                    return Err(Error::Invalid(format!("node {i}: zero pool size or stride")));
                }
                check_hyper(i, &[k, stride])?;
                if l < k {
                    return Err(Error::Invalid(format!(
                        "node {i}: pool window {k} larger than length {l}"
                    )));
                }
                Ok(Shape::Series {
                    c,
                    l: (l - k) / stride + 1,
                })
            }
            LayerSpec::Upsample { factor } => {
                let (c, l) = series(ins[0])?;
                if factor == 0 {
                    return Err(Error::Invalid(format!("node {i}: zero upsample factor")));
                }
                check_hyper(i, &[factor])?;
                let l_out = l
                    .checked_mul(factor)
                    .ok_or_else(|| Error::Invalid(format!("node {i}: upsample overflows")))?;
                Ok(Shape::Series { c, l: l_out })
            }
            LayerSpec::Add => {
                let a = series(ins[0])?;
                let b = series(ins[1])?;
                if a != b {
                    return Err(Error::Invalid(format!(
                        "node {i}: add inputs disagree, {a:?} vs {b:?}"
                    )));
                }
                Ok(ins[0])
            }
            LayerSpec::Concat => {
                let (mut c_total, l0) = series(ins[0])?;
                for &s in &ins[1..] {
                    let (c, l) = series(s)?;
                    if l != l0 {
                        return Err(Error::Invalid(format!(
                            "node {i}: concat lengths disagree, {l0} vs {l}"
                        )));
                    }
                    c_total += c;
                }
                Ok(Shape::Series { c: c_total, l: l0 })
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let f = match ins[0] {
                    Shape::Vector { f } => f,
                    Shape::Series { .. } => {
                        return Err(Error::Invalid(format!(
                            "node {i}: linear needs a vector input; pool to one first"
                        )))
                    }
                };
                if f != in_features {
                    return Err(Error::Invalid(format!(
                        "node {i}: linear expects {in_features} features, got {f}"
                    )));
                }
                if out_features == 0 {
                    return Err(Error::Invalid(format!("node {i}: zero out_features")));
                }
                Ok(Shape::Vector { f: out_features })
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _) = series(ins[0])?;
                Ok(Shape::Vector { f: c })
            }
            LayerSpec::TrimTail { len } => {
                let (c, l) = series(ins[0])?;
                if len == 0 || len > l {
                    return Err(Error::Invalid(format!(
                        "node {i}: cannot trim length {l} to {len}"
                    )));
                }
                Ok(Shape::Series { c, l: len })
            }
        }
    }

    /// Full structural validation: shapes infer cleanly and every
    /// intermediate node feeds some later node.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let shapes = self.infer_shapes()?;
        let mut used = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for &src in &node.inputs {
                if src != INPUT {
                    used[src] = true;
                }
            }
        }
        if let Some(i) = used[..self.nodes.len() - 1].iter().position(|u| !u) {
            return Err(Error::Invalid(format!(
                "node {i} is dangling: nothing consumes its output"
            )));
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.infer_shapes()?.last().expect("graphs are non-empty"))
    }

    pub fn param_count(&self) -> u64 {
        self.nodes
            .iter()
            .fold(0u64, |a, n| a.saturating_add(n.spec.param_count()))
    }

    pub fn mac_count(&self) -> Result<u64> {
        let shapes = self.infer_shapes()?;
        Ok(self
            .nodes
            .iter()
            .zip(&shapes)
            .fold(0u64, |a, (n, &s)| a.saturating_add(n.spec.mac_count(s))))
    }

    /// Same graph behind a tail-trim adapter, so a network built for
    /// `self.input_len` samples can consume `real_len >= input_len` ones.
    pub fn with_trimmed_input(&self, real_len: usize) -> Result<Graph> {
        if real_len < self.input_len {
            return Err(Error::Invalid(format!(
                "cannot adapt {}-sample network to {real_len} samples",
                self.input_len
            )));
        }
        let mut g = Graph::new(self.input_channels, real_len);
        g.push(LayerSpec::TrimTail { len: self.input_len }, vec![INPUT]);
        for node in &self.nodes {
            let inputs = node
                .inputs
                .iter()
                .map(|&src| if src == INPUT { 0 } else { src + 1 })
                .collect();
            g.push(node.spec, inputs);
        }
        g.validate()?;
        Ok(g)
    }

    /// Indices of nodes that consume node `i`'s output.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&i))
            .map(|(j, _)| j)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(specs: &[LayerSpec], c: usize, l: usize) -> Graph {
        let mut g = Graph::new(c, l);
        let mut prev = INPUT;
        for &s in specs {
            prev = g.push(s, vec![prev]);
        }
        g
    }

    #[test]
    fn conv_and_dw_param_formulas() {
        let conv = LayerSpec::Conv1d {
            c_in: 4,
            c_out: 8,
            k: 3,
            stride: 1,
            padding: 1,
        };
        let dw = LayerSpec::DwBlock {
            c_in: 4,
            c_out: 8,
            k: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(conv.param_count(), 104);
        assert_eq!(dw.param_count(), 56);
        assert_eq!(LayerSpec::Identity.param_count(), 0);
    }

    #[test]
    fn dw_is_cheaper_exactly_when_channels_and_kernel_are_large() {
        for c in 1..12usize {
            for k in 1..9usize {
                let conv = LayerSpec::Conv1d {
                    c_in: c,
                    c_out: c,
                    k,
                    stride: 1,
                    padding: 0,
                };
                let dw = LayerSpec::DwBlock {
                    c_in: c,
                    c_out: c,
                    k,
                    stride: 1,
                    padding: 0,
                };
                let cheaper = dw.param_count() < conv.param_count();
                assert_eq!(cheaper, c * k > c + k + 1, "c={c} k={k}");
            }
        }
    }

    #[test]
    fn shape_inference_on_a_conv_pool_head() {
        let g = chain(
            &[
                LayerSpec::Conv1d {
                    c_in: 1,
                    c_out: 4,
                    k: 7,
                    stride: 2,
                    padding: 3,
                },
                LayerSpec::BatchNorm { c: 4 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 1,
                },
            ],
            1,
            625,
        );
        let shapes = g.validate().unwrap();
        assert_eq!(shapes[0], Shape::Series { c: 4, l: 313 });
        assert_eq!(shapes[3], Shape::Series { c: 4, l: 156 });
        assert_eq!(*shapes.last().unwrap(), Shape::Vector { f: 1 });
    }

    #[test]
    fn add_requires_matching_shapes() {
        let mut g = Graph::new(2, 10);
        let a = g.push(
            LayerSpec::Conv1d {
                c_in: 2,
                c_out: 2,
                k: 3,
                stride: 1,
                padding: 1,
            },
            vec![INPUT],
        );
        let b = g.push(
            LayerSpec::Conv1d {
                c_in: 2,
                c_out: 2,
                k: 3,
                stride: 2,
                padding: 1,
            },
            vec![INPUT],
        );
        g.push(LayerSpec::Add, vec![a, b]);
        assert!(matches!(g.validate(), Err(Error::Invalid(_))));
    }

    #[test]
    fn concat_sums_channels() {
        let mut g = Graph::new(3, 8);
        let a = g.push(LayerSpec::Identity, vec![INPUT]);
        let b = g.push(LayerSpec::Relu, vec![INPUT]);
        g.push(LayerSpec::Concat, vec![a, b]);
        assert_eq!(g.output_shape().unwrap(), Shape::Series { c: 6, l: 8 });
    }

    #[test]
    fn dangling_node_is_rejected() {
        let mut g = Graph::new(1, 8);
        g.push(LayerSpec::Relu, vec![INPUT]);
        g.push(LayerSpec::Identity, vec![INPUT]);
        let err = g.validate().unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");
    }

    #[test]
    fn forward_reference_is_rejected() {
        let mut g = Graph::new(1, 8);
        g.push(LayerSpec::Relu, vec![1]);
        g.push(LayerSpec::Identity, vec![0]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn linear_rejects_series_input() {
        let g = chain(
            &[LayerSpec::Linear {
                in_features: 8,
                out_features: 1,
            }],
            1,
            8,
        );
        assert!(g.validate().is_err());
    }

    #[test]
    fn mac_count_on_a_small_conv() {
        // 2 output channels x 5 samples x (k=3 x c_in=1) = 30 MACs.
        let g = chain(
            &[LayerSpec::Conv1d {
                c_in: 1,
                c_out: 2,
                k: 3,
                stride: 1,
                padding: 0,
            }],
            1,
            7,
        );
        assert_eq!(g.mac_count().unwrap(), 30);
    }

    #[test]
    fn trim_adapter_feeds_a_shorter_network() {
        let g = chain(
            &[LayerSpec::Conv1d {
                c_in: 1,
                c_out: 2,
                k: 3,
                stride: 1,
                padding: 1,
            }],
            1,
            624,
        );
        let adapted = g.with_trimmed_input(625).unwrap();
        assert_eq!(adapted.input_len, 625);
        assert_eq!(adapted.output_shape().unwrap(), Shape::Series { c: 2, l: 624 });
        assert!(g.with_trimmed_input(623).is_err());
    }

    #[test]
    fn serde_roundtrip_preserves_graph() {
        let g = chain(
            &[
                LayerSpec::Conv1d {
                    c_in: 1,
                    c_out: 2,
                    k: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
            ],
            1,
            16,
        );
        let s = serde_json::to_string(&g).unwrap();
        let back: Graph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }
}
