//! Reference interpreter for [`IntGraph`]: bit-exact integer execution
//! (the behavior the emitted C must reproduce byte for byte) plus an
//! independent f64 simulation used as the rounding-error oracle.
//!
//! All post-requantization additions wrap on overflow, mirroring the
//! unsigned-cast additions in the emitted C, so behavior stays defined and
//! identical even for degenerate constants.

use crate::error::{Error, Result};
use crate::graph::{Shape, INPUT};
use crate::quant::{apply_requant, decode_requant, Requant};

use super::{shape_elems, IntGraph, IntLayer, IntOp};

#[inline]
fn clamp_i8(v: i32) -> i8 {
    v.clamp(-128, 127) as i8
}

#[inline]
fn requant_to_out(acc: i32, r: Requant, zp_out: i32) -> i8 {
    clamp_i8(apply_requant(acc, r).wrapping_add(zp_out))
}

/// Quantize a float input onto the graph's input grid.
pub fn quantize_input(g: &IntGraph, x: &[f32]) -> Result<Vec<i8>> {
    if x.len() != shape_elems(g.input_shape()) {
        return Err(Error::Shape(format!(
            "input has {} values, graph wants {:?}",
            x.len(),
            g.input_shape()
        )));
    }
    Ok(g.input_q.quantize(x))
}

/// Dequantize final-layer codes with the output edge parameters.
pub fn dequantize_output(g: &IntGraph, q: &[i8]) -> Vec<f32> {
    g.output_q().dequantize(q)
}

/// Run the graph on input codes (row-major `[c][l]`), returning every
/// layer's output codes.
pub fn run_trace(g: &IntGraph, x: &[i8]) -> Result<Vec<Vec<i8>>> {
    let shapes = g.validate()?;
    if x.len() != shape_elems(g.input_shape()) {
        return Err(Error::Shape(format!(
            "input has {} codes, graph wants {:?}",
            x.len(),
            g.input_shape()
        )));
    }
    let mut outs: Vec<Vec<i8>> = Vec::with_capacity(g.layers.len());
    for (i, layer) in g.layers.iter().enumerate() {
        let ins: Vec<&[i8]> = layer
            .inputs
            .iter()
            .map(|&s| if s == INPUT { x } else { outs[s].as_slice() })
            .collect();
        let in_shapes: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|&s| if s == INPUT { g.input_shape() } else { shapes[s] })
            .collect();
        outs.push(eval_layer(g, layer, &ins, &in_shapes, shapes[i]));
    }
    Ok(outs)
}

/// Run the graph on input codes, returning the final output codes.
pub fn run(g: &IntGraph, x: &[i8]) -> Result<Vec<i8>> {
    Ok(run_trace(g, x)?.pop().expect("validated graphs have layers"))
}

fn eval_layer(g: &IntGraph, layer: &IntLayer, ins: &[&[i8]], in_shapes: &[Shape], out_shape: Shape) -> Vec<i8> {
    let w = &g.weights[layer.w_off..layer.w_off + layer.w_len];
    let b = &g.biases[layer.b_off..layer.b_off + layer.b_len];
    let mut out = Vec::with_capacity(shape_elems(out_shape));
    match layer.op {
        IntOp::Conv {
            c_in,
            c_out,
            k,
            stride,
            padding,
        } => {
            let (_, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let zp_in = layer.zp_in[0];
            for co in 0..c_out {
                for ol in 0..l_out {
                    let mut acc = b[co];
                    let pos0 = (ol * stride) as isize - padding as isize;
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let ip = pos0 + kk as isize;
                            if ip < 0 || ip >= l_in as isize {
                                continue;
                            }
                            let xq = ins[0][ci * l_in + ip as usize] as i32 - zp_in;
                            let wq = w[(co * c_in + ci) * k + kk] as i32 - layer.zp_w;
                            acc += xq * wq;
                        }
                    }
                    out.push(requant_to_out(acc, layer.requant[0], layer.zp_out));
                }
            }
        }
        IntOp::Dw { c, k, stride, padding } => {
            let (_, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let zp_in = layer.zp_in[0];
            for ch in 0..c {
                for ol in 0..l_out {
                    let mut acc = b[ch];
                    let pos0 = (ol * stride) as isize - padding as isize;
                    for kk in 0..k {
                        let ip = pos0 + kk as isize;
                        if ip < 0 || ip >= l_in as isize {
                            continue;
                        }
                        let xq = ins[0][ch * l_in + ip as usize] as i32 - zp_in;
                        let wq = w[ch * k + kk] as i32 - layer.zp_w;
                        acc += xq * wq;
                    }
                    out.push(requant_to_out(acc, layer.requant[0], layer.zp_out));
                }
            }
        }
        IntOp::Linear { in_f, out_f } => {
            let zp_in = layer.zp_in[0];
            for o in 0..out_f {
                let mut acc = b[o];
                for f in 0..in_f {
                    let xq = ins[0][f] as i32 - zp_in;
                    let wq = w[o * in_f + f] as i32 - layer.zp_w;
                    acc += xq * wq;
                }
                out.push(requant_to_out(acc, layer.requant[0], layer.zp_out));
            }
        }
        IntOp::Add => {
            for e in 0..shape_elems(out_shape) {
                let t0 = apply_requant(ins[0][e] as i32 - layer.zp_in[0], layer.requant[0]);
                let t1 = apply_requant(ins[1][e] as i32 - layer.zp_in[1], layer.requant[1]);
                out.push(clamp_i8(t0.wrapping_add(t1).wrapping_add(layer.zp_out)));
            }
        }
        IntOp::Concat => {
            for (j, &input) in ins.iter().enumerate() {
                for &q in input {
                    out.push(requant_to_out(q as i32 - layer.zp_in[j], layer.requant[j], layer.zp_out));
                }
            }
        }
        IntOp::MaxPool { k, stride } => {
            let (c, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            for ch in 0..c {
                for ol in 0..l_out {
                    let base = ch * l_in + ol * stride;
                    let m = (0..k).map(|kk| ins[0][base + kk]).max().unwrap();
                    out.push(m);
                }
            }
        }
        IntOp::AvgPool { k, stride } => {
            let (c, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let zp_in = layer.zp_in[0];
            for ch in 0..c {
                for ol in 0..l_out {
                    let base = ch * l_in + ol * stride;
                    let acc: i32 = (0..k).map(|kk| ins[0][base + kk] as i32 - zp_in).sum();
                    out.push(requant_to_out(acc, layer.requant[0], layer.zp_out));
                }
            }
        }
        IntOp::GlobalAvgPool => {
            let (c, l_in) = series(in_shapes[0]);
            let zp_in = layer.zp_in[0];
            for ch in 0..c {
                let acc: i32 = (0..l_in).map(|t| ins[0][ch * l_in + t] as i32 - zp_in).sum();
                out.push(requant_to_out(acc, layer.requant[0], layer.zp_out));
            }
        }
        IntOp::Upsample { factor } => {
            let (c, l_in) = series(in_shapes[0]);
            for ch in 0..c {
                for ol in 0..l_in * factor {
                    out.push(ins[0][ch * l_in + ol / factor]);
                }
            }
        }
        IntOp::TrimTail { len } => {
            let (c, l_in) = series(in_shapes[0]);
            for ch in 0..c {
                out.extend_from_slice(&ins[0][ch * l_in..ch * l_in + len]);
            }
        }
        IntOp::Identity => out.extend_from_slice(ins[0]),
        IntOp::Requant => {
            for &q in ins[0] {
                out.push(requant_to_out(q as i32 - layer.zp_in[0], layer.requant[0], layer.zp_out));
            }
        }
    }
    debug_assert_eq!(out.len(), shape_elems(out_shape));
    out
}

fn series(s: Shape) -> (usize, usize) {
    match s {
        Shape::Series { c, l } => (c, l),
        Shape::Vector { f } => (1, f),
    }
}

// ── float simulation oracle ──────────────────────────────────────────────

/// Result of simulating one layer in real arithmetic: the exact values and
/// where they land on the layer's output grid.
pub struct SimLayer {
    pub real: Vec<f64>,
    pub codes: Vec<i8>,
}

/// Simulate every layer in f64, feeding each one the codes the integer
/// interpreter actually produced for its inputs. With identical inputs the
/// only divergence left is accumulator rounding, so each layer's integer
/// output must land within 1 LSB of `codes`, and the dequantized final
/// output within 1.5 output scales of `real`.
///
/// Weight scales are reconstructed from the stored fixed-point multipliers
/// (`s_w = M0 * s_out / s_in`), which is how export encoded them.
pub fn simulate(g: &IntGraph, x: &[i8]) -> Result<Vec<SimLayer>> {
    let shapes = g.validate()?;
    let trace = run_trace(g, x)?;
    let mut sims: Vec<SimLayer> = Vec::with_capacity(g.layers.len());
    for (i, layer) in g.layers.iter().enumerate() {
        let in_f: Vec<Vec<f64>> = layer
            .inputs
            .iter()
            .map(|&s| {
                let codes: &[i8] = if s == INPUT { x } else { &trace[s] };
                let q = g.src_q(s);
                codes.iter().map(|&c| q.dequantize_one(c)).collect()
            })
            .collect();
        let in_shapes: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|&s| if s == INPUT { g.input_shape() } else { shapes[s] })
            .collect();
        let real = sim_layer(g, layer, &in_f, &in_shapes, shapes[i]);
        let codes = real
            .iter()
            .map(|&v| {
                let q = (v / layer.out_scale).round_ties_even() + layer.zp_out as f64;
                q.clamp(-128.0, 127.0) as i8
            })
            .collect();
        sims.push(SimLayer { real, codes });
    }
    Ok(sims)
}

fn sim_layer(g: &IntGraph, layer: &IntLayer, ins: &[Vec<f64>], in_shapes: &[Shape], out_shape: Shape) -> Vec<f64> {
    let s_in = |j: usize| g.src_q(layer.inputs[j]).scale;
    let mut out = Vec::with_capacity(shape_elems(out_shape));
    match layer.op {
        IntOp::Conv {
            c_in,
            c_out,
            k,
            stride,
            padding,
        } => {
            let (_, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let s_w = decode_requant(layer.requant[0]) * layer.out_scale / s_in(0);
            let w = &g.weights[layer.w_off..layer.w_off + layer.w_len];
            let b = &g.biases[layer.b_off..layer.b_off + layer.b_len];
            for co in 0..c_out {
                for ol in 0..l_out {
                    let mut acc = b[co] as f64 * s_in(0) * s_w;
                    let pos0 = (ol * stride) as isize - padding as isize;
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let ip = pos0 + kk as isize;
                            if ip < 0 || ip >= l_in as isize {
                                continue;
                            }
                            let wf = (w[(co * c_in + ci) * k + kk] as i32 - layer.zp_w) as f64 * s_w;
                            acc += ins[0][ci * l_in + ip as usize] * wf;
                        }
                    }
                    out.push(acc);
                }
            }
        }
        IntOp::Dw { c, k, stride, padding } => {
            let (_, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let s_w = decode_requant(layer.requant[0]) * layer.out_scale / s_in(0);
            let w = &g.weights[layer.w_off..layer.w_off + layer.w_len];
            let b = &g.biases[layer.b_off..layer.b_off + layer.b_len];
            for ch in 0..c {
                for ol in 0..l_out {
                    let mut acc = b[ch] as f64 * s_in(0) * s_w;
                    let pos0 = (ol * stride) as isize - padding as isize;
                    for kk in 0..k {
                        let ip = pos0 + kk as isize;
                        if ip < 0 || ip >= l_in as isize {
                            continue;
                        }
                        let wf = (w[ch * k + kk] as i32 - layer.zp_w) as f64 * s_w;
                        acc += ins[0][ch * l_in + ip as usize] * wf;
                    }
                    out.push(acc);
                }
            }
        }
        IntOp::Linear { in_f, out_f } => {
            let s_w = decode_requant(layer.requant[0]) * layer.out_scale / s_in(0);
            let w = &g.weights[layer.w_off..layer.w_off + layer.w_len];
            let b = &g.biases[layer.b_off..layer.b_off + layer.b_len];
            for o in 0..out_f {
                let mut acc = b[o] as f64 * s_in(0) * s_w;
                for f in 0..in_f {
                    acc += ins[0][f] * (w[o * in_f + f] as i32 - layer.zp_w) as f64 * s_w;
                }
                out.push(acc);
            }
        }
        IntOp::Add => {
            for e in 0..shape_elems(out_shape) {
                out.push(ins[0][e] + ins[1][e]);
            }
        }
        IntOp::Concat => {
            for input in ins {
                out.extend_from_slice(input);
            }
        }
        IntOp::MaxPool { k, stride } => {
            let (c, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            for ch in 0..c {
                for ol in 0..l_out {
                    let base = ch * l_in + ol * stride;
                    let m = (0..k).map(|kk| ins[0][base + kk]).fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
            }
        }
        IntOp::AvgPool { k, stride } => {
            let (c, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            for ch in 0..c {
                for ol in 0..l_out {
                    let base = ch * l_in + ol * stride;
                    let sum: f64 = (0..k).map(|kk| ins[0][base + kk]).sum();
                    out.push(sum / k as f64);
                }
            }
        }
        IntOp::GlobalAvgPool => {
            let (c, l_in) = series(in_shapes[0]);
            for ch in 0..c {
                let sum: f64 = ins[0][ch * l_in..(ch + 1) * l_in].iter().sum();
                out.push(sum / l_in as f64);
            }
        }
        IntOp::Upsample { factor } => {
            let (c, l_in) = series(in_shapes[0]);
            for ch in 0..c {
                for ol in 0..l_in * factor {
                    out.push(ins[0][ch * l_in + ol / factor]);
                }
            }
        }
        IntOp::TrimTail { len } => {
            let (c, l_in) = series(in_shapes[0]);
            for ch in 0..c {
                out.extend_from_slice(&ins[0][ch * l_in..ch * l_in + len]);
            }
        }
        IntOp::Identity | IntOp::Requant => out.extend_from_slice(&ins[0]),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tests::{rq, small_int_graph};
    use super::*;
    use crate::quant::QuantParams;

    fn unit_q() -> QuantParams {
        QuantParams {
            scale: 1.0,
            zero_point: 0,
        }
    }

    fn one_layer(input_channels: usize, input_len: usize, layer: IntLayer, weights: Vec<i8>, biases: Vec<i32>) -> IntGraph {
        IntGraph {
            input_channels,
            input_len,
            input_q: unit_q(),
            layers: vec![layer],
            weights,
            biases,
        }
    }

    #[test]
    fn conv_matches_hand_arithmetic() {
        // x = (1, 2, 3), w = (1, 1, 1), bias 0, all zero points 0,
        // multiplier 0.5: acc = 6, halved and rounded to 3.
        let g = one_layer(
            1,
            3,
            IntLayer {
                op: IntOp::Conv {
                    c_in: 1,
                    c_out: 1,
                    k: 3,
                    stride: 1,
                    padding: 0,
                },
                inputs: vec![INPUT],
                requant: vec![rq(0.5)],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 0,
                out_scale: 2.0,
                w_off: 0,
                w_len: 3,
                b_off: 0,
                b_len: 1,
            },
            vec![1, 1, 1],
            vec![0],
        );
        assert_eq!(run(&g, &[1, 2, 3]).unwrap(), vec![3]);
    }

    #[test]
    fn zero_input_leaves_only_the_bias() {
        // All codes at the zero point: acc = bias = 100, quartered to 25,
        // plus output zero point 5.
        let g = one_layer(
            1,
            3,
            IntLayer {
                op: IntOp::Conv {
                    c_in: 1,
                    c_out: 1,
                    k: 3,
                    stride: 1,
                    padding: 0,
                },
                inputs: vec![INPUT],
                requant: vec![rq(0.25)],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 5,
                out_scale: 1.0,
                w_off: 0,
                w_len: 3,
                b_off: 0,
                b_len: 1,
            },
            vec![7, -3, 11],
            vec![100],
        );
        assert_eq!(run(&g, &[0, 0, 0]).unwrap(), vec![30]);
    }

    #[test]
    fn identity_graph_echoes_its_input() {
        let g = one_layer(
            1,
            4,
            IntLayer {
                op: IntOp::Identity,
                inputs: vec![INPUT],
                requant: vec![],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 0,
                out_scale: 1.0,
                w_off: 0,
                w_len: 0,
                b_off: 0,
                b_len: 0,
            },
            vec![],
            vec![],
        );
        let x = [9i8, -4, 0, 127];
        assert_eq!(run(&g, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn saturating_multiplier_clamps_to_the_rails() {
        // M0 = 64: acc 100 maps far past 127, acc -100 far below -128.
        let g = one_layer(
            1,
            1,
            IntLayer {
                op: IntOp::Conv {
                    c_in: 1,
                    c_out: 1,
                    k: 1,
                    stride: 1,
                    padding: 0,
                },
                inputs: vec![INPUT],
                requant: vec![rq(64.0)],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 0,
                out_scale: 1.0,
                w_off: 0,
                w_len: 1,
                b_off: 0,
                b_len: 1,
            },
            vec![1],
            vec![0],
        );
        assert_eq!(run(&g, &[100]).unwrap(), vec![127]);
        assert_eq!(run(&g, &[-100]).unwrap(), vec![-128]);
    }

    #[test]
    fn add_requantizes_each_side() {
        // Both inputs on the input grid; left halved, right halved:
        // out = (a - 0)/2 + (b - 0)/2 + 1.
        let g = IntGraph {
            input_channels: 1,
            input_len: 2,
            input_q: unit_q(),
            layers: vec![
                IntLayer {
                    op: IntOp::Identity,
                    inputs: vec![INPUT],
                    requant: vec![],
                    zp_in: vec![0],
                    zp_w: 0,
                    zp_out: 0,
                    out_scale: 1.0,
                    w_off: 0,
                    w_len: 0,
                    b_off: 0,
                    b_len: 0,
                },
                IntLayer {
                    op: IntOp::Add,
                    inputs: vec![INPUT, 0],
                    requant: vec![rq(0.5), rq(0.5)],
                    zp_in: vec![0, 0],
                    zp_w: 0,
                    zp_out: 1,
                    out_scale: 2.0,
                    w_off: 0,
                    w_len: 0,
                    b_off: 0,
                    b_len: 0,
                },
            ],
            weights: vec![],
            biases: vec![],
        };
        // (10/2) + (10/2) + 1 = 11; (-7/2) + (-7/2) + 1: each half rounds
        // -3.5 up to -3, so -5.
        assert_eq!(run(&g, &[10, -7]).unwrap(), vec![11, -5]);
    }

    #[test]
    fn pooling_upsampling_and_trimming_move_codes_around() {
        let mk = |op: IntOp, l: usize| {
            one_layer(
                1,
                l,
                IntLayer {
                    op,
                    inputs: vec![INPUT],
                    requant: vec![],
                    zp_in: vec![0],
                    zp_w: 0,
                    zp_out: 0,
                    out_scale: 1.0,
                    w_off: 0,
                    w_len: 0,
                    b_off: 0,
                    b_len: 0,
                },
                vec![],
                vec![],
            )
        };
        let g = mk(IntOp::MaxPool { k: 2, stride: 2 }, 6);
        assert_eq!(run(&g, &[1, 5, -3, -9, 0, 2]).unwrap(), vec![5, -3, 2]);
        let g = mk(IntOp::Upsample { factor: 3 }, 2);
        assert_eq!(run(&g, &[4, -1]).unwrap(), vec![4, 4, 4, -1, -1, -1]);
        let g = mk(IntOp::TrimTail { len: 2 }, 5);
        assert_eq!(run(&g, &[8, 7, 6, 5, 4]).unwrap(), vec![8, 7]);
    }

    #[test]
    fn average_pool_requantizes_the_window_sum() {
        let g = one_layer(
            1,
            4,
            IntLayer {
                op: IntOp::AvgPool { k: 2, stride: 2 },
                inputs: vec![INPUT],
                requant: vec![rq(0.5)],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 0,
                out_scale: 1.0,
                w_off: 0,
                w_len: 0,
                b_off: 0,
                b_len: 0,
            },
            vec![],
            vec![],
        );
        assert_eq!(run(&g, &[10, 20, -5, -6]).unwrap(), vec![15, -5]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let g = small_int_graph();
        let x: Vec<i8> = (0..8).map(|i| (i * 13 % 256) as u8 as i8).collect();
        let a = run_trace(&g, &x).unwrap();
        let b = run_trace(&g, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_stays_within_one_code_of_the_integer_path() {
        let g = small_int_graph();
        let x: Vec<i8> = (0..8).map(|i| (i as i32 * 31 - 100) as i8).collect();
        let trace = run_trace(&g, &x).unwrap();
        let sims = simulate(&g, &x).unwrap();
        for (i, (t, s)) in trace.iter().zip(&sims).enumerate() {
            for (a, b) in t.iter().zip(&s.codes) {
                assert!(
                    (*a as i32 - *b as i32).abs() <= 1,
                    "layer {i}: integer {a} vs simulated {b}"
                );
            }
        }
    }

    #[test]
    fn rejects_wrong_input_length() {
        let g = small_int_graph();
        assert!(run(&g, &[0; 5]).is_err());
        assert!(quantize_input(&g, &[0.0; 5]).is_err());
    }

    #[test]
    fn quantize_dequantize_roundtrip_is_affine() {
        let g = small_int_graph();
        let x: Vec<f32> = (0..8).map(|i| i as f32 * 0.03 - 0.1).collect();
        let q = quantize_input(&g, &x).unwrap();
        for (v, qq) in x.iter().zip(&q) {
            let back = g.input_q.dequantize_one(*qq);
            assert!((back - *v as f64).abs() <= g.input_q.scale / 2.0 + 1e-12);
        }
    }
}
