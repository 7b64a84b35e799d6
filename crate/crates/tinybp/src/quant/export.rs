//! Lowering a quantization-trained model to an executable [`IntGraph`].
//!
//! Weights quantize per tensor from their final min-max range; biases land
//! as i32 on the `s_in * s_w` grid; each edge's affine parameters collapse
//! into one fixed-point multiplier per arithmetic path. A producer whose
//! only consumer is a clipped activation becomes a single int layer whose
//! output grid is the activation's clip grid: the int8 bottom clamp at
//! code -128 sits exactly at 0.0, so the clamp IS the activation. A
//! standalone activation (after a pool, say) becomes a pure requantize
//! layer onto its clip grid for the same reason.

use crate::error::{Error, Result};
use crate::graph::{LayerSpec, Shape, INPUT};
use crate::intrt::{IntGraph, IntLayer, IntOp};
use crate::model::NodeParams;
use crate::quant::{encode_requant, minmax_affine_params, QuantParams, Requant};

use super::qat::{QatModel, Site};

struct Packer {
    layers: Vec<IntLayer>,
    weights: Vec<i8>,
    biases: Vec<i32>,
}

impl Packer {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        op: IntOp,
        inputs: Vec<usize>,
        requant: Vec<Requant>,
        zp_in: Vec<i32>,
        zp_w: i32,
        out: QuantParams,
        w: Vec<i8>,
        b: Vec<i32>,
    ) -> usize {
        let idx = self.layers.len();
        self.layers.push(IntLayer {
            op,
            inputs,
            requant,
            zp_in,
            zp_w,
            zp_out: out.zero_point,
            out_scale: out.scale,
            w_off: self.weights.len(),
            w_len: w.len(),
            b_off: self.biases.len(),
            b_len: b.len(),
        });
        self.weights.extend(w);
        self.biases.extend(b);
        idx
    }
}

fn quant_bias_one(v: f32, s: f64) -> Result<i32> {
    let q = (v as f64 / s).round_ties_even();
    if q.abs() > i32::MAX as f64 {
        return Err(Error::Quant(format!(
            "bias {v} does not fit i32 on grid {s:e}"
        )));
    }
    Ok(q as i32)
}

/// Lower one dot-product layer: quantize weights and bias, fold the three
/// scales into the requant multiplier.
#[allow(clippy::too_many_arguments)]
fn lower_dot(
    p: &mut Packer,
    op: IntOp,
    src: usize,
    in_q: QuantParams,
    out_q: QuantParams,
    w: &[f32],
    b: &[f32],
) -> Result<usize> {
    let wq_params = minmax_affine_params(w)?;
    let wq = wq_params.quantize(w);
    let s_b = in_q.scale * wq_params.scale;
    let bq = b
        .iter()
        .map(|&v| quant_bias_one(v, s_b))
        .collect::<Result<Vec<i32>>>()?;
    let r = encode_requant(in_q.scale * wq_params.scale / out_q.scale)?;
    Ok(p.push(
        op,
        vec![src],
        vec![r],
        vec![in_q.zero_point],
        wq_params.zero_point,
        out_q,
        wq,
        bq,
    ))
}

pub fn export_int_graph(qm: &QatModel) -> Result<IntGraph> {
    let g = &qm.model.graph;
    let shapes = g.validate()?;
    let eq = qm.edge_quant();
    let mut p = Packer {
        layers: Vec::new(),
        weights: Vec::new(),
        biases: Vec::new(),
    };
    // Maps each float node to the int layer producing its value. A fused
    // activation maps to its producer's layer.
    let mut int_idx: Vec<Option<usize>> = vec![None; g.nodes.len()];

    let edge_q = |src: usize| if src == INPUT { qm.input_q } else { eq[src] };
    let series_len = |src: usize| match if src == INPUT { g.input_shape() } else { shapes[src] } {
        Shape::Series { l, .. } => l,
        Shape::Vector { f } => f,
    };

    for (i, node) in g.nodes.iter().enumerate() {
        let int_src = |src: usize| {
            if src == INPUT {
                INPUT
            } else {
                int_idx[src].expect("earlier nodes are lowered first")
            }
        };
        // A fused producer writes straight onto its activation's clip grid;
        // everything else exposes its own edge grid.
        let out_q = match qm.sites[i] {
            Site::Fused => eq[g.consumers(i)[0]],
            _ => eq[i],
        };
        let src0 = node.inputs.first().copied().unwrap_or(INPUT);
        match (&node.spec, &qm.model.params[i]) {
            (
                &LayerSpec::Conv1d {
                    c_in,
                    c_out,
                    k,
                    stride,
                    padding,
                },
                NodeParams::Conv { w, b },
            ) => {
                let (wd, bd) = (w.data(), b.data());
                let idx = lower_dot(
                    &mut p,
                    IntOp::Conv {
                        c_in,
                        c_out,
                        k,
                        stride,
                        padding,
                    },
                    int_src(src0),
                    edge_q(src0),
                    out_q,
                    &wd,
                    &bd,
                )?;
                int_idx[i] = Some(idx);
            }
            (
                &LayerSpec::DwBlock {
                    c_in,
                    c_out,
                    k,
                    stride,
                    padding,
                },
                NodeParams::Dw {
                    dw_w,
                    dw_b,
                    pw_w,
                    pw_b,
                },
            ) => {
                let inner = qm.inner_q[i]
                    .ok_or_else(|| Error::Quant(format!("node {i}: no inner grid calibrated")))?;
                let dw_idx = {
                    let (wd, bd) = (dw_w.data(), dw_b.data());
                    lower_dot(
                        &mut p,
                        IntOp::Dw {
                            c: c_in,
                            k,
                            stride,
                            padding,
                        },
                        int_src(src0),
                        edge_q(src0),
                        inner,
                        &wd,
                        &bd,
                    )?
                };
                let (wd, bd) = (pw_w.data(), pw_b.data());
                let idx = lower_dot(
                    &mut p,
                    IntOp::Conv {
                        c_in,
                        c_out,
                        k: 1,
                        stride: 1,
                        padding: 0,
                    },
                    dw_idx,
                    inner,
                    out_q,
                    &wd,
                    &bd,
                )?;
                int_idx[i] = Some(idx);
            }
            (&LayerSpec::Linear { in_features, out_features }, NodeParams::Linear { w, b }) => {
                let (wd, bd) = (w.data(), b.data());
                let idx = lower_dot(
                    &mut p,
                    IntOp::Linear {
                        in_f: in_features,
                        out_f: out_features,
                    },
                    int_src(src0),
                    edge_q(src0),
                    out_q,
                    &wd,
                    &bd,
                )?;
                int_idx[i] = Some(idx);
            }
            (LayerSpec::Add, _) | (LayerSpec::Concat, _) => {
                let requant = node
                    .inputs
                    .iter()
                    .map(|&s| encode_requant(edge_q(s).scale / out_q.scale))
                    .collect::<Result<Vec<Requant>>>()?;
                let zp_in = node.inputs.iter().map(|&s| edge_q(s).zero_point).collect();
                let op = if matches!(node.spec, LayerSpec::Add) {
                    IntOp::Add
                } else {
                    IntOp::Concat
                };
                let inputs = node.inputs.iter().map(|&s| int_src(s)).collect();
                int_idx[i] = Some(p.push(op, inputs, requant, zp_in, 0, out_q, vec![], vec![]));
            }
            (LayerSpec::Relu, _) => {
                let fused = src0 != INPUT && matches!(qm.sites[src0], Site::Fused);
                if fused {
                    int_idx[i] = int_idx[src0];
                } else {
                    // Standalone activation: requantize onto the clip grid.
                    let in_q = edge_q(src0);
                    let r = encode_requant(in_q.scale / out_q.scale)?;
                    int_idx[i] = Some(p.push(
                        IntOp::Requant,
                        vec![int_src(src0)],
                        vec![r],
                        vec![in_q.zero_point],
                        0,
                        out_q,
                        vec![],
                        vec![],
                    ));
                }
            }
            (&LayerSpec::MaxPool { k, stride }, _) => {
                let in_q = edge_q(src0);
                int_idx[i] = Some(p.push(
                    IntOp::MaxPool { k, stride },
                    vec![int_src(src0)],
                    vec![],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (&LayerSpec::AvgPool { k, stride }, _) => {
                let in_q = edge_q(src0);
                let r = encode_requant(1.0 / k as f64)?;
                int_idx[i] = Some(p.push(
                    IntOp::AvgPool { k, stride },
                    vec![int_src(src0)],
                    vec![r],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (LayerSpec::GlobalAvgPool, _) => {
                let in_q = edge_q(src0);
                let r = encode_requant(1.0 / series_len(src0) as f64)?;
                int_idx[i] = Some(p.push(
                    IntOp::GlobalAvgPool,
                    vec![int_src(src0)],
                    vec![r],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (&LayerSpec::Upsample { factor }, _) => {
                let in_q = edge_q(src0);
                int_idx[i] = Some(p.push(
                    IntOp::Upsample { factor },
                    vec![int_src(src0)],
                    vec![],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (&LayerSpec::TrimTail { len }, _) => {
                let in_q = edge_q(src0);
                int_idx[i] = Some(p.push(
                    IntOp::TrimTail { len },
                    vec![int_src(src0)],
                    vec![],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (LayerSpec::Identity, _) => {
                let in_q = edge_q(src0);
                int_idx[i] = Some(p.push(
                    IntOp::Identity,
                    vec![int_src(src0)],
                    vec![],
                    vec![in_q.zero_point],
                    0,
                    out_q,
                    vec![],
                    vec![],
                ));
            }
            (LayerSpec::BatchNorm { .. }, _) => {
                return Err(Error::Quant(format!(
                    "node {i}: normalization must be folded before export"
                )));
            }
            (spec, _) => {
                return Err(Error::Invalid(format!(
                    "node {i} ({spec:?}): parameters do not match the layer"
                )));
            }
        }
    }

    let ig = IntGraph {
        input_channels: g.input_channels,
        input_len: g.input_len,
        input_q: qm.input_q,
        layers: p.layers,
        weights: p.weights,
        biases: p.biases,
    };
    ig.validate()?;
    Ok(ig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Node};
    use crate::intrt::{interp, write_int_graph};
    use crate::model::FloatModel;
    use crate::quant::QatModel;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_head_graph() -> Graph {
        let mut g = Graph::new(1, 16);
        g.nodes.push(Node {
            spec: LayerSpec::Conv1d {
                c_in: 1,
                c_out: 4,
                k: 3,
                stride: 1,
                padding: 1,
            },
            inputs: vec![INPUT],
        });
        g.nodes.push(Node {
            spec: LayerSpec::Relu,
            inputs: vec![0],
        });
        g.nodes.push(Node {
            spec: LayerSpec::MaxPool { k: 2, stride: 2 },
            inputs: vec![1],
        });
        g.nodes.push(Node {
            spec: LayerSpec::GlobalAvgPool,
            inputs: vec![2],
        });
        g.nodes.push(Node {
            spec: LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
            inputs: vec![3],
        });
        g
    }

    fn calib_tensor(c: usize, l: usize, seed: u64) -> crate::tensor::Value<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..4 * c * l).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        Tensor::leaf(&[4, c, l], data, false).unwrap()
    }

    fn attach(graph: Graph, seed: u64) -> QatModel {
        let (c, l) = (graph.input_channels, graph.input_len);
        let fm = FloatModel::init(graph, seed).unwrap();
        QatModel::attach(fm, &calib_tensor(c, l, seed ^ 0x5eed)).unwrap()
    }

    #[test]
    fn fused_activations_disappear_into_their_producers() {
        let qm = attach(conv_head_graph(), 1);
        let ig = export_int_graph(&qm).unwrap();
        // conv+relu collapse into one layer: conv, maxpool, gap, linear.
        assert_eq!(ig.layers.len(), 4);
        assert!(matches!(ig.layers[0].op, IntOp::Conv { .. }));
        // The fused output grid is the clip grid: bottom code is 0.0.
        assert_eq!(ig.layers[0].zp_out, -128);
        assert!(matches!(ig.layers[1].op, IntOp::MaxPool { .. }));
        assert!(matches!(ig.layers[2].op, IntOp::GlobalAvgPool));
        assert!(matches!(ig.layers[3].op, IntOp::Linear { .. }));
    }

    #[test]
    fn unfused_activations_become_requant_layers() {
        // identity between conv and relu blocks fusion.
        let mut g = Graph::new(1, 12);
        g.nodes.push(Node {
            spec: LayerSpec::Conv1d {
                c_in: 1,
                c_out: 2,
                k: 3,
                stride: 1,
                padding: 1,
            },
            inputs: vec![INPUT],
        });
        g.nodes.push(Node {
            spec: LayerSpec::Identity,
            inputs: vec![0],
        });
        g.nodes.push(Node {
            spec: LayerSpec::Relu,
            inputs: vec![1],
        });
        let qm = attach(g, 2);
        let ig = export_int_graph(&qm).unwrap();
        assert_eq!(ig.layers.len(), 3);
        assert!(matches!(ig.layers[2].op, IntOp::Requant));
        assert_eq!(ig.layers[2].zp_out, -128);
    }

    #[test]
    fn depthwise_blocks_split_into_two_stages() {
        let mut g = Graph::new(2, 12);
        g.nodes.push(Node {
            spec: LayerSpec::DwBlock {
                c_in: 2,
                c_out: 3,
                k: 3,
                stride: 1,
                padding: 1,
            },
            inputs: vec![INPUT],
        });
        g.nodes.push(Node {
            spec: LayerSpec::Relu,
            inputs: vec![0],
        });
        let qm = attach(g, 3);
        let ig = export_int_graph(&qm).unwrap();
        assert_eq!(ig.layers.len(), 2);
        assert!(matches!(ig.layers[0].op, IntOp::Dw { c: 2, k: 3, .. }));
        assert!(
            matches!(ig.layers[1].op, IntOp::Conv { c_in: 2, c_out: 3, k: 1, .. }),
            "{:?}",
            ig.layers[1].op
        );
        // The block fuses with the activation at its pointwise stage.
        assert_eq!(ig.layers[1].zp_out, -128);
    }

    #[test]
    fn export_is_deterministic() {
        let qm = attach(conv_head_graph(), 4);
        let a = export_int_graph(&qm).unwrap();
        let b = export_int_graph(&qm).unwrap();
        assert_eq!(a, b);
        assert_eq!(write_int_graph(&a).unwrap(), write_int_graph(&b).unwrap());
    }

    #[test]
    fn integer_model_tracks_the_quantized_float_model() {
        let qm = attach(conv_head_graph(), 5);
        let ig = export_int_graph(&qm).unwrap();
        let s_out = ig.output_q().scale;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let xs: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            let x = Tensor::leaf(&[1, 1, 16], xs.clone(), false).unwrap();
            let yf = qm.forward(&x).unwrap();
            let codes = interp::quantize_input(&ig, &xs).unwrap();
            let yi = interp::dequantize_output(&ig, &interp::run(&ig, &codes).unwrap());
            for (a, b) in yf.data().iter().zip(&yi) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
        assert!(
            worst <= 3.0 * s_out,
            "integer path drifted {worst} vs grid {s_out}"
        );
    }
}
