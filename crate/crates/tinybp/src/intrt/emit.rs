//! C code generation. A validated [`IntGraph`] becomes one C99 translation
//! unit (`model.c`), a small interface header (`model.h`), and a weights
//! header (`weights.h`).
//!
//! The generated code restricts itself to 8/16/32-bit integer arithmetic;
//! some deployment targets have no 64-bit support at all. The one place a
//! 64-bit intermediate would appear, the requantization multiply, is
//! emulated with 16-bit half-words. [`requant_pair`] is a Rust port of
//! that emulation, kept line for line in sync with the C text and pinned
//! against the wide implementation by tests, so the C inherits the
//! equivalence proof.
//!
//! Activations live in one static arena laid out by the memory planner.
//! Emission is a pure function of the graph, so output bytes are
//! deterministic.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use crate::error::{Error, Result};
use crate::graph::{Shape, INPUT};
#[cfg(test)]
use crate::quant::Requant;

use super::memory::plan;
use super::{shape_elems, IntGraph, IntLayer, IntOp};

/// Rust port of the generated `requant` function: `(acc * m + 2^(n-1)) >> n`
/// computed from 16-bit halves with explicit carries, result truncated to
/// 32 bits. Matches `quant::apply_requant` for every input; kept as the
/// test oracle that pins the C template below to the reference semantics.
#[cfg(test)]
pub(crate) fn requant_pair(acc: i32, r: Requant) -> i32 {
    let (m, n) = (r.m, r.n);
    let mag: u32 = if acc < 0 {
        ((-(acc.wrapping_add(1))) as u32).wrapping_add(1)
    } else {
        acc as u32
    };
    let (a0, a1) = (mag & 0xFFFF, mag >> 16);
    let (m0, m1) = (m & 0xFFFF, m >> 16);
    let p00 = a0 * m0;
    let p01 = a0 * m1;
    let p10 = a1 * m0;
    let p11 = a1 * m1;
    let mid = p01.wrapping_add(p10);
    let mid_c: u32 = if mid < p01 { 0x10000 } else { 0 };
    let mut lo = p00.wrapping_add(mid << 16);
    let lo_c: u32 = if lo < p00 { 1 } else { 0 };
    let mut hi = p11 + (mid >> 16) + mid_c + lo_c;
    if acc < 0 {
        lo = (!lo).wrapping_add(1);
        hi = (!hi).wrapping_add(u32::from(lo == 0));
    }
    let rc_lo: u32 = if n <= 32 { 1u32 << (n - 1) } else { 0 };
    let rc_hi: u32 = if n >= 33 { 1u32 << (n - 33) } else { 0 };
    let lo2 = lo.wrapping_add(rc_lo);
    hi = hi.wrapping_add(rc_hi).wrapping_add(u32::from(lo2 < lo));
    if n < 32 {
        ((lo2 >> n) | (hi << (32 - n))) as i32
    } else if n == 32 {
        hi as i32
    } else {
        let sh = n - 32;
        let h = hi as i32;
        if h >= 0 {
            h >> sh
        } else {
            !((!h) >> sh)
        }
    }
}

const REQUANT_C: &str = r#"/* (acc * m + 2^(n-1)) >> n, the 32x32->64 product built from 16-bit
 * halves with explicit carries; result truncated to 32 bits. */
static int32_t requant(int32_t acc, uint32_t m, int32_t n) {
    uint32_t mag = acc < 0 ? (uint32_t)(-(acc + 1)) + 1u : (uint32_t)acc;
    uint32_t a0 = mag & 0xFFFFu, a1 = mag >> 16;
    uint32_t m0 = m & 0xFFFFu, m1 = m >> 16;
    uint32_t p00 = a0 * m0;
    uint32_t p01 = a0 * m1;
    uint32_t p10 = a1 * m0;
    uint32_t p11 = a1 * m1;
    uint32_t mid = p01 + p10;
    uint32_t mid_c = mid < p01 ? 0x10000u : 0u;
    uint32_t lo = p00 + (mid << 16);
    uint32_t lo_c = lo < p00 ? 1u : 0u;
    uint32_t hi = p11 + (mid >> 16) + mid_c + lo_c;
    uint32_t lo2, rc_lo, rc_hi;
    if (acc < 0) {
        lo = ~lo + 1u;
        hi = ~hi + (lo == 0u ? 1u : 0u);
    }
    rc_lo = n <= 32 ? 1u << (n - 1) : 0u;
    rc_hi = n >= 33 ? 1u << (n - 33) : 0u;
    lo2 = lo + rc_lo;
    hi = hi + rc_hi + (lo2 < lo ? 1u : 0u);
    if (n < 32) {
        return (int32_t)((lo2 >> n) | (hi << (32 - n)));
    }
    if (n == 32) {
        return (int32_t)hi;
    }
    {
        int32_t h = (int32_t)hi;
        int32_t sh = n - 32;
        return h >= 0 ? h >> sh : (int32_t)~((~(uint32_t)h) >> sh);
    }
}

static int32_t wadd(int32_t a, int32_t b) {
    return (int32_t)((uint32_t)a + (uint32_t)b);
}

static int8_t clamp8(int32_t v) {
    return (int8_t)(v < -128 ? -128 : (v > 127 ? 127 : v));
}
"#;

/// The generated sources, ready to be written out as `model.h`, `model.c`,
/// and `weights.h`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CSource {
    pub model_h: String,
    pub model_c: String,
    pub weights_h: String,
}

pub fn emit_c(g: &IntGraph) -> Result<CSource> {
    let shapes = g.validate()?;
    let p = plan(g)?;
    let in_elems = shape_elems(g.input_shape());
    let out_elems = shape_elems(*shapes.last().unwrap());
    let out_q = g.output_q();

    let mut h = String::new();
    let _ = writeln!(h, "#ifndef TINYBP_MODEL_H");
    let _ = writeln!(h, "#define TINYBP_MODEL_H");
    let _ = writeln!(h);
    let _ = writeln!(h, "#include <stdint.h>");
    let _ = writeln!(h);
    let _ = writeln!(h, "#define TINYBP_INPUT_CHANNELS {}", g.input_channels);
    let _ = writeln!(h, "#define TINYBP_INPUT_LEN {}", g.input_len);
    let _ = writeln!(h, "#define TINYBP_INPUT_ELEMS {in_elems}");
    let _ = writeln!(h, "#define TINYBP_OUTPUT_ELEMS {out_elems}");
    let _ = writeln!(h);
    let _ = writeln!(
        h,
        "/* input grid: scale {:e}, zero point {}; output grid: scale {:e}, zero point {} */",
        g.input_q.scale, g.input_q.zero_point, out_q.scale, out_q.zero_point
    );
    let _ = writeln!(h, "void tinybp_run(const int8_t *input, int8_t *output);");
    let _ = writeln!(h);
    let _ = writeln!(h, "#endif");

    let mut w = String::new();
    let _ = writeln!(w, "#ifndef TINYBP_WEIGHTS_H");
    let _ = writeln!(w, "#define TINYBP_WEIGHTS_H");
    let _ = writeln!(w);
    let _ = writeln!(w, "#include <stdint.h>");
    let _ = writeln!(w);
    emit_array(&mut w, "tinybp_w", "int8_t", g.weights.iter().map(|&v| v as i64));
    emit_array(&mut w, "tinybp_b", "int32_t", g.biases.iter().map(|&v| v as i64));
    let _ = writeln!(w, "#endif");

    let mut c = String::new();
    let _ = writeln!(c, "/* Generated integer inference model; do not edit. */");
    let _ = writeln!(c);
    let _ = writeln!(c, "#include \"model.h\"");
    let _ = writeln!(c, "#include \"weights.h\"");
    let _ = writeln!(c);
    let _ = writeln!(c, "static int8_t arena[{}];", p.arena_bytes);
    let _ = writeln!(c);
    c.push_str(REQUANT_C);
    let _ = writeln!(c);
    let _ = writeln!(c, "void tinybp_run(const int8_t *input, int8_t *output) {{");
    let _ = writeln!(
        c,
        "    {{ int32_t e; for (e = 0; e < {in_elems}; e++) arena[{} + e] = input[e]; }}",
        p.slots[0].offset
    );
    for (i, layer) in g.layers.iter().enumerate() {
        let in_shapes: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|&s| if s == INPUT { g.input_shape() } else { shapes[s] })
            .collect();
        let in_offs: Vec<usize> = layer
            .inputs
            .iter()
            .map(|&s| p.slots[if s == INPUT { 0 } else { s + 1 }].offset)
            .collect();
        emit_layer(&mut c, i, layer, &in_shapes, &in_offs, shapes[i], p.slots[i + 1].offset);
    }
    let _ = writeln!(
        c,
        "    {{ int32_t e; for (e = 0; e < {out_elems}; e++) output[e] = arena[{} + e]; }}",
        p.slots[g.layers.len()].offset
    );
    let _ = writeln!(c, "}}");

    Ok(CSource {
        model_h: h,
        model_c: c,
        weights_h: w,
    })
}

fn emit_array(out: &mut String, name: &str, ty: &str, vals: impl ExactSizeIterator<Item = i64>) {
    // C forbids zero-length arrays; pad an unused zero.
    if vals.len() == 0 {
        let _ = writeln!(out, "static const {ty} {name}[1] = {{ 0 }};");
        let _ = writeln!(out);
        return;
    }
    let _ = writeln!(out, "static const {ty} {name}[{}] = {{", vals.len());
    let mut line = String::from("   ");
    for v in vals {
        let _ = write!(line, " {v},");
        if line.len() > 72 {
            let _ = writeln!(out, "{line}");
            line = String::from("   ");
        }
    }
    if !line.trim().is_empty() {
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "}};");
    let _ = writeln!(out);
}

fn series(s: Shape) -> (usize, usize) {
    match s {
        Shape::Series { c, l } => (c, l),
        Shape::Vector { f } => (1, f),
    }
}

fn emit_layer(c: &mut String, i: usize, layer: &IntLayer, in_shapes: &[Shape], in_offs: &[usize], out_shape: Shape, out_off: usize) {
    let rq = |j: usize| {
        let r = layer.requant[j];
        format!("requant(acc, {}u, {})", r.m, r.n)
    };
    let out_elems = shape_elems(out_shape);
    let _ = writeln!(c, "    /* layer {i}: {} */", op_label(&layer.op));
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
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t co, ol, ci, kk;
        for (co = 0; co < {c_out}; co++) {{
            for (ol = 0; ol < {l_out}; ol++) {{
                int32_t acc = tinybp_b[{} + co];
                for (ci = 0; ci < {c_in}; ci++) {{
                    for (kk = 0; kk < {k}; kk++) {{
                        int32_t ip = ol * {stride} - {padding} + kk;
                        if (ip < 0 || ip >= {l_in}) continue;
                        acc += ((int32_t)x[ci * {l_in} + ip] - {}) *
                               ((int32_t)tinybp_w[{} + (co * {c_in} + ci) * {k} + kk] - {});
                    }}
                }}
                y[co * {l_out} + ol] = clamp8(wadd({}, {}));
            }}
        }}
    }}",
                in_offs[0],
                layer.b_off,
                layer.zp_in[0],
                layer.w_off,
                layer.zp_w,
                rq(0),
                layer.zp_out
            );
        }
        IntOp::Dw { c: ch_n, k, stride, padding } => {
            let (_, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, ol, kk;
        for (ch = 0; ch < {ch_n}; ch++) {{
            for (ol = 0; ol < {l_out}; ol++) {{
                int32_t acc = tinybp_b[{} + ch];
                for (kk = 0; kk < {k}; kk++) {{
                    int32_t ip = ol * {stride} - {padding} + kk;
                    if (ip < 0 || ip >= {l_in}) continue;
                    acc += ((int32_t)x[ch * {l_in} + ip] - {}) *
                           ((int32_t)tinybp_w[{} + ch * {k} + kk] - {});
                }}
                y[ch * {l_out} + ol] = clamp8(wadd({}, {}));
            }}
        }}
    }}",
                in_offs[0],
                layer.b_off,
                layer.zp_in[0],
                layer.w_off,
                layer.zp_w,
                rq(0),
                layer.zp_out
            );
        }
        IntOp::Linear { in_f, out_f } => {
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t o, f;
        for (o = 0; o < {out_f}; o++) {{
            int32_t acc = tinybp_b[{} + o];
            for (f = 0; f < {in_f}; f++) {{
                acc += ((int32_t)x[f] - {}) * ((int32_t)tinybp_w[{} + o * {in_f} + f] - {});
            }}
            y[o] = clamp8(wadd({}, {}));
        }}
    }}",
                in_offs[0],
                layer.b_off,
                layer.zp_in[0],
                layer.w_off,
                layer.zp_w,
                rq(0),
                layer.zp_out
            );
        }
        IntOp::Add => {
            let (r0, r1) = (layer.requant[0], layer.requant[1]);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x0 = arena + {}; const int8_t *x1 = arena + {}; int8_t *y = arena + {out_off};
        int32_t e;
        for (e = 0; e < {out_elems}; e++) {{
            int32_t t0 = requant((int32_t)x0[e] - {}, {}u, {});
            int32_t t1 = requant((int32_t)x1[e] - {}, {}u, {});
            y[e] = clamp8(wadd(wadd(t0, t1), {}));
        }}
    }}",
                in_offs[0],
                in_offs[1],
                layer.zp_in[0],
                r0.m,
                r0.n,
                layer.zp_in[1],
                r1.m,
                r1.n,
                layer.zp_out
            );
        }
        IntOp::Concat => {
            let _ = writeln!(c, "    {{ int8_t *y = arena + {out_off};");
            let mut at = 0usize;
            for (j, &off) in in_offs.iter().enumerate() {
                let n = shape_elems(in_shapes[j]);
                let r = layer.requant[j];
                let _ = writeln!(
                    c,
                    "        {{ const int8_t *x = arena + {off}; int32_t e;
          for (e = 0; e < {n}; e++) {{
              int32_t acc = (int32_t)x[e] - {};
              y[{at} + e] = clamp8(wadd(requant(acc, {}u, {}), {}));
          }} }}",
                    layer.zp_in[j],
                    r.m,
                    r.n,
                    layer.zp_out
                );
                at += n;
            }
            let _ = writeln!(c, "    }}");
        }
        IntOp::MaxPool { k, stride } => {
            let (ch_n, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, ol, kk;
        for (ch = 0; ch < {ch_n}; ch++) {{
            for (ol = 0; ol < {l_out}; ol++) {{
                int8_t m = x[ch * {l_in} + ol * {stride}];
                for (kk = 1; kk < {k}; kk++) {{
                    int8_t v = x[ch * {l_in} + ol * {stride} + kk];
                    if (v > m) m = v;
                }}
                y[ch * {l_out} + ol] = m;
            }}
        }}
    }}",
                in_offs[0]
            );
        }
        IntOp::AvgPool { k, stride } => {
            let (ch_n, l_in) = series(in_shapes[0]);
            let (_, l_out) = series(out_shape);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, ol, kk;
        for (ch = 0; ch < {ch_n}; ch++) {{
            for (ol = 0; ol < {l_out}; ol++) {{
                int32_t acc = 0;
                for (kk = 0; kk < {k}; kk++) {{
                    acc += (int32_t)x[ch * {l_in} + ol * {stride} + kk] - {};
                }}
                y[ch * {l_out} + ol] = clamp8(wadd({}, {}));
            }}
        }}
    }}",
                in_offs[0],
                layer.zp_in[0],
                rq(0),
                layer.zp_out
            );
        }
        IntOp::GlobalAvgPool => {
            let (ch_n, l_in) = series(in_shapes[0]);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, t;
        for (ch = 0; ch < {ch_n}; ch++) {{
            int32_t acc = 0;
            for (t = 0; t < {l_in}; t++) {{
                acc += (int32_t)x[ch * {l_in} + t] - {};
            }}
            y[ch] = clamp8(wadd({}, {}));
        }}
    }}",
                in_offs[0],
                layer.zp_in[0],
                rq(0),
                layer.zp_out
            );
        }
        IntOp::Upsample { factor } => {
            let (ch_n, l_in) = series(in_shapes[0]);
            let l_out = l_in * factor;
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, ol;
        for (ch = 0; ch < {ch_n}; ch++) {{
            for (ol = 0; ol < {l_out}; ol++) {{
                y[ch * {l_out} + ol] = x[ch * {l_in} + ol / {factor}];
            }}
        }}
    }}",
                in_offs[0]
            );
        }
        IntOp::TrimTail { len } => {
            let (ch_n, l_in) = series(in_shapes[0]);
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t ch, t;
        for (ch = 0; ch < {ch_n}; ch++) {{
            for (t = 0; t < {len}; t++) {{
                y[ch * {len} + t] = x[ch * {l_in} + t];
            }}
        }}
    }}",
                in_offs[0]
            );
        }
        IntOp::Identity => {
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t e;
        for (e = 0; e < {out_elems}; e++) y[e] = x[e];
    }}",
                in_offs[0]
            );
        }
        IntOp::Requant => {
            let r = layer.requant[0];
            let _ = writeln!(
                c,
                "    {{ const int8_t *x = arena + {}; int8_t *y = arena + {out_off};
        int32_t e;
        for (e = 0; e < {out_elems}; e++) {{
            int32_t acc = (int32_t)x[e] - {};
            y[e] = clamp8(wadd(requant(acc, {}u, {}), {}));
        }}
    }}",
                in_offs[0],
                layer.zp_in[0],
                r.m,
                r.n,
                layer.zp_out
            );
        }
    }
}

fn op_label(op: &IntOp) -> String {
    match *op {
        IntOp::Conv {
            c_in,
            c_out,
            k,
            stride,
            padding,
        } => format!("conv c_in={c_in} c_out={c_out} k={k} stride={stride} padding={padding}"),
        IntOp::Dw { c, k, stride, padding } => {
            format!("depthwise c={c} k={k} stride={stride} padding={padding}")
        }
        IntOp::Linear { in_f, out_f } => format!("linear {in_f}->{out_f}"),
        IntOp::Add => "add".into(),
        IntOp::Concat => "concat".into(),
        IntOp::MaxPool { k, stride } => format!("maxpool k={k} stride={stride}"),
        IntOp::AvgPool { k, stride } => format!("avgpool k={k} stride={stride}"),
        IntOp::GlobalAvgPool => "global avgpool".into(),
        IntOp::Upsample { factor } => format!("upsample x{factor}"),
        IntOp::TrimTail { len } => format!("trim to {len}"),
        IntOp::Identity => "identity".into(),
        IntOp::Requant => "requant".into(),
    }
}

/// Self-contained demo driver: reads input blocks from stdin, writes output
/// blocks to stdout. Used by the differential test harness.
pub fn demo_main() -> String {
    r#"#include <stdio.h>

#include "model.h"

int main(void) {
    static int8_t in[TINYBP_INPUT_ELEMS];
    static int8_t out[TINYBP_OUTPUT_ELEMS];
    while (fread(in, 1, sizeof in, stdin) == sizeof in) {
        tinybp_run(in, out);
        fwrite(out, 1, sizeof out, stdout);
    }
    return 0;
}
"#
    .to_string()
}

/// True when a C compiler is reachable as `cc`.
pub fn have_cc() -> bool {
    Command::new("cc")
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Differential harness: emit, compile with `cc`, and run the program on
/// each input, returning one output block per input.
pub fn compile_and_run(g: &IntGraph, inputs: &[Vec<i8>], dir: &Path) -> Result<Vec<Vec<i8>>> {
    let shapes = g.validate()?;
    let out_elems = shape_elems(*shapes.last().unwrap());
    let src = emit_c(g)?;
    std::fs::write(dir.join("model.h"), &src.model_h)?;
    std::fs::write(dir.join("model.c"), &src.model_c)?;
    std::fs::write(dir.join("weights.h"), &src.weights_h)?;
    std::fs::write(dir.join("main.c"), demo_main())?;

    let prog = dir.join("model_demo");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-O1")
        .arg("-o")
        .arg(&prog)
        .arg(dir.join("main.c"))
        .arg(dir.join("model.c"))
        .arg("-I")
        .arg(dir)
        .output()?;
    if !out.status.success() {
        return Err(Error::Invalid(format!(
            "cc failed: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }

    let mut child = Command::new(&prog)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()?;
    let feed: Vec<u8> = inputs
        .iter()
        .flat_map(|v| v.iter().map(|&b| b as u8))
        .collect();
    child
        .stdin
        .take()
        .expect("stdin is piped")
        .write_all(&feed)?;
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(Error::Invalid("compiled model crashed".into()));
    }
    if out.stdout.len() != inputs.len() * out_elems {
        return Err(Error::Invalid(format!(
            "compiled model wrote {} bytes, expected {}",
            out.stdout.len(),
            inputs.len() * out_elems
        )));
    }
    Ok(out
        .stdout
        .chunks(out_elems)
        .map(|c| c.iter().map(|&b| b as i8).collect())
        .collect())
}
