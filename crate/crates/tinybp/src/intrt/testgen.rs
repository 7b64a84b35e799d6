//! Random well-formed int graphs, used to drive the interpreter/simulation
//! equivalence suite and the C codegen differential tests.
//!
//! Grids are drawn the way export produces them: scales log-uniform in a
//! plausible band, zero points anywhere in int8, weights avoiding -128,
//! and every fixed-point multiplier derived from the scales it connects.

use rand::Rng;

use crate::graph::{Shape, INPUT};
use crate::quant::{encode_requant, QuantParams, Requant};

use super::{IntGraph, IntLayer, IntOp};

pub struct GenConfig {
    pub max_layers: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_layers: 10 }
    }
}

struct Builder {
    input_channels: usize,
    input_len: usize,
    input_q: QuantParams,
    layers: Vec<IntLayer>,
    shapes: Vec<Shape>,
    weights: Vec<i8>,
    biases: Vec<i32>,
}

impl Builder {
    fn shape_of(&self, src: usize) -> Shape {
        if src == INPUT {
            Shape::Series {
                c: self.input_channels,
                l: self.input_len,
            }
        } else {
            self.shapes[src]
        }
    }

    fn q_of(&self, src: usize) -> QuantParams {
        if src == INPUT {
            self.input_q
        } else {
            QuantParams {
                scale: self.layers[src].out_scale,
                zero_point: self.layers[src].zp_out,
            }
        }
    }

    fn tip(&self) -> usize {
        if self.layers.is_empty() {
            INPUT
        } else {
            self.layers.len() - 1
        }
    }

    fn push(&mut self, op: IntOp, inputs: Vec<usize>, requant: Vec<Requant>, out_q: QuantParams, zp_w: i32, w: Vec<i8>, b: Vec<i32>, out_shape: Shape) {
        let zp_in = inputs.iter().map(|&s| self.q_of(s).zero_point).collect();
        self.layers.push(IntLayer {
            op,
            inputs,
            requant,
            zp_in,
            zp_w,
            zp_out: out_q.zero_point,
            out_scale: out_q.scale,
            w_off: self.weights.len(),
            w_len: w.len(),
            b_off: self.biases.len(),
            b_len: b.len(),
        });
        self.shapes.push(out_shape);
        self.weights.extend(w);
        self.biases.extend(b);
    }
}

fn rand_scale(rng: &mut impl Rng) -> f64 {
    10f64.powf(rng.random_range(-3.0..-1.0))
}

fn rand_q(rng: &mut impl Rng) -> QuantParams {
    QuantParams {
        scale: rand_scale(rng),
        zero_point: rng.random_range(-128..=127),
    }
}

fn rand_weights(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(-127..=127i32) as i8).collect()
}

fn rand_biases(rng: &mut impl Rng, n: usize) -> Vec<i32> {
    (0..n).map(|_| rng.random_range(-5000..=5000)).collect()
}

/// Random graph with valid geometry, consistent zero points, and encodable
/// multipliers. Always validates.
pub fn random_int_graph(rng: &mut impl Rng, cfg: &GenConfig) -> IntGraph {
    let mut b = Builder {
        input_channels: rng.random_range(1..=3),
        input_len: rng.random_range(8..=24),
        input_q: rand_q(rng),
        layers: Vec::new(),
        shapes: Vec::new(),
        weights: Vec::new(),
        biases: Vec::new(),
    };
    let steps = rng.random_range(2..=cfg.max_layers.max(3) - 1);
    for _ in 0..steps {
        let tip = b.tip();
        match b.shape_of(tip) {
            Shape::Vector { f } => {
                // Past a global pool only head-style layers make sense.
                grow_vector(rng, &mut b, tip, f);
            }
            Shape::Series { c, l } => {
                grow_series(rng, &mut b, tip, c, l);
            }
        }
    }
    // Occasionally pool to a vector and put a linear head on top.
    if rng.random_bool(0.4) {
        if let Shape::Series { c, l } = b.shape_of(b.tip()) {
            let tip = b.tip();
            let in_q = b.q_of(tip);
            let m0 = 1.0 / l as f64;
            b.push(
                IntOp::GlobalAvgPool,
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                in_q,
                0,
                vec![],
                vec![],
                Shape::Vector { f: c },
            );
            let tip = b.tip();
            let out_q = rand_q(rng);
            let s_w = rand_scale(rng);
            let out_f = rng.random_range(1..=3);
            let m0 = in_q.scale * s_w / out_q.scale;
            b.push(
                IntOp::Linear { in_f: c, out_f },
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                rng.random_range(-16..=16),
                rand_weights(rng, out_f * c),
                rand_biases(rng, out_f),
                Shape::Vector { f: out_f },
            );
        }
    }
    if b.layers.is_empty() {
        let q = b.input_q;
        let shape = b.shape_of(INPUT);
        b.push(IntOp::Identity, vec![INPUT], vec![], q, 0, vec![], vec![], shape);
    }
    let g = IntGraph {
        input_channels: b.input_channels,
        input_len: b.input_len,
        input_q: b.input_q,
        layers: b.layers,
        weights: b.weights,
        biases: b.biases,
    };
    g.validate().expect("generated graph must validate");
    g
}

fn grow_vector(rng: &mut impl Rng, b: &mut Builder, tip: usize, f: usize) {
    let in_q = b.q_of(tip);
    match rng.random_range(0..3) {
        0 => {
            let out_q = rand_q(rng);
            let s_w = rand_scale(rng);
            let out_f = rng.random_range(1..=4);
            let m0 = in_q.scale * s_w / out_q.scale;
            b.push(
                IntOp::Linear { in_f: f, out_f },
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                rng.random_range(-16..=16),
                rand_weights(rng, out_f * f),
                rand_biases(rng, out_f),
                Shape::Vector { f: out_f },
            );
        }
        1 => {
            let out_q = rand_q(rng);
            let m0 = in_q.scale / out_q.scale;
            b.push(
                IntOp::Requant,
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                0,
                vec![],
                vec![],
                Shape::Vector { f },
            );
        }
        _ => {
            b.push(IntOp::Identity, vec![tip], vec![], in_q, 0, vec![], vec![], Shape::Vector { f });
        }
    }
}

fn grow_series(rng: &mut impl Rng, b: &mut Builder, tip: usize, c: usize, l: usize) {
    let in_q = b.q_of(tip);
    // Candidate ops gated by geometry so every pick is valid.
    let mut picks: Vec<u32> = vec![0, 0, 1];
    if l >= 4 {
        picks.extend([2, 2, 3, 4, 5]);
    }
    if l <= 24 {
        picks.push(6);
    }
    if l >= 2 {
        picks.push(7);
    }
    // Same-shape earlier tensor makes a residual add possible; same-length
    // tensors allow concat.
    let add_src = (0..b.layers.len())
        .chain([INPUT])
        .find(|&s| s != tip && b.shape_of(s) == Shape::Series { c, l });
    if add_src.is_some() {
        picks.extend([8, 8]);
    }
    let cat_src = (0..b.layers.len()).chain([INPUT]).find(|&s| {
        s != tip && matches!(b.shape_of(s), Shape::Series { c: cc, l: ll } if ll == l && cc + c <= 8)
    });
    if cat_src.is_some() {
        picks.push(9);
    }
    match picks[rng.random_range(0..picks.len())] {
        0 => {
            // Conv with small random geometry.
            let c_out = rng.random_range(1..=4);
            let k = rng.random_range(1..=3.min(l));
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let l_out = (l + 2 * padding - k) / stride + 1;
            let out_q = rand_q(rng);
            let s_w = rand_scale(rng);
            let m0 = in_q.scale * s_w / out_q.scale;
            b.push(
                IntOp::Conv {
                    c_in: c,
                    c_out,
                    k,
                    stride,
                    padding,
                },
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                rng.random_range(-16..=16),
                rand_weights(rng, c_out * c * k),
                rand_biases(rng, c_out),
                Shape::Series { c: c_out, l: l_out },
            );
        }
        1 => {
            let k = rng.random_range(1..=3.min(l));
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let l_out = (l + 2 * padding - k) / stride + 1;
            let out_q = rand_q(rng);
            let s_w = rand_scale(rng);
            let m0 = in_q.scale * s_w / out_q.scale;
            b.push(
                IntOp::Dw {
                    c,
                    k,
                    stride,
                    padding,
                },
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                rng.random_range(-16..=16),
                rand_weights(rng, c * k),
                rand_biases(rng, c),
                Shape::Series { c, l: l_out },
            );
        }
        2 => {
            let k = rng.random_range(2..=3.min(l));
            let stride = rng.random_range(1..=k);
            b.push(
                IntOp::MaxPool { k, stride },
                vec![tip],
                vec![],
                in_q,
                0,
                vec![],
                vec![],
                Shape::Series {
                    c,
                    l: (l - k) / stride + 1,
                },
            );
        }
        3 => {
            let k = rng.random_range(2..=3.min(l));
            let stride = rng.random_range(1..=k);
            b.push(
                IntOp::AvgPool { k, stride },
                vec![tip],
                vec![encode_requant(1.0 / k as f64).unwrap()],
                in_q,
                0,
                vec![],
                vec![],
                Shape::Series {
                    c,
                    l: (l - k) / stride + 1,
                },
            );
        }
        4 => {
            let len = rng.random_range(l / 2..l).max(1);
            b.push(
                IntOp::TrimTail { len },
                vec![tip],
                vec![],
                in_q,
                0,
                vec![],
                vec![],
                Shape::Series { c, l: len },
            );
        }
        5 => {
            let out_q = rand_q(rng);
            let m0 = in_q.scale / out_q.scale;
            b.push(
                IntOp::Requant,
                vec![tip],
                vec![encode_requant(m0).unwrap()],
                out_q,
                0,
                vec![],
                vec![],
                Shape::Series { c, l },
            );
        }
        6 => {
            let factor = rng.random_range(2..=3);
            b.push(
                IntOp::Upsample { factor },
                vec![tip],
                vec![],
                in_q,
                0,
                vec![],
                vec![],
                Shape::Series { c, l: l * factor },
            );
        }
        7 => {
            b.push(IntOp::Identity, vec![tip], vec![], in_q, 0, vec![], vec![], Shape::Series { c, l });
        }
        8 => {
            let other = add_src.unwrap();
            let out_q = rand_q(rng);
            let m = |s: usize| encode_requant(b.q_of(s).scale / out_q.scale).unwrap();
            b.push(
                IntOp::Add,
                vec![tip, other],
                vec![m(tip), m(other)],
                out_q,
                0,
                vec![],
                vec![],
                Shape::Series { c, l },
            );
        }
        _ => {
            let other = cat_src.unwrap();
            let c_other = match b.shape_of(other) {
                Shape::Series { c: cc, .. } => cc,
                Shape::Vector { .. } => unreachable!(),
            };
            let out_q = rand_q(rng);
            let m = |s: usize| encode_requant(b.q_of(s).scale / out_q.scale).unwrap();
            b.push(
                IntOp::Concat,
                vec![tip, other],
                vec![m(tip), m(other)],
                out_q,
                0,
                vec![],
                vec![],
                Shape::Series { c: c + c_other, l },
            );
        }
    }
}

/// Uniform random input codes for a graph.
pub fn random_input(rng: &mut impl Rng, g: &IntGraph) -> Vec<i8> {
    let n = g.input_channels * g.input_len;
    (0..n).map(|_| rng.random_range(-128..=127i32) as i8).collect()
}
