//! Static memory planning and cost accounting for int graphs.
//!
//! Every tensor (the input plus each layer output) gets a lifetime
//! interval from its production step to its last consumer, and tensors
//! whose lifetimes cannot overlap share a region. Assignment looks only at
//! lifetimes, never at sizes, so shrinking any tensor can only shrink the
//! arena; the budget check stays monotone under architecture shrinking. On
//! a plain chain the plan degenerates to two ping-pong buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::INPUT;

use super::{shape_elems, IntGraph, IntOp};

/// Placement of one tensor inside the activation arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSlot {
    pub offset: usize,
    pub bytes: usize,
}

/// Arena layout: slot 0 is the graph input, slot `i + 1` is layer `i`'s
/// output.
#[derive(Debug, Clone)]
pub struct MemoryPlan {
    pub slots: Vec<TensorSlot>,
    pub arena_bytes: usize,
    pub regions: usize,
}

pub fn plan(g: &IntGraph) -> Result<MemoryPlan> {
    let shapes = g.validate()?;
    let n = g.layers.len() + 1;
    let mut bytes = Vec::with_capacity(n);
    bytes.push(shape_elems(g.input_shape()));
    bytes.extend(shapes.iter().map(|&s| shape_elems(s)));

    // Lifetime of tensor t is [t, end[t]]; the final output never dies.
    let mut end: Vec<usize> = (0..n).collect();
    for (i, layer) in g.layers.iter().enumerate() {
        for &src in &layer.inputs {
            let t = if src == INPUT { 0 } else { src + 1 };
            end[t] = end[t].max(i + 1);
        }
    }
    end[n - 1] = usize::MAX;

    // First-fit by region; a region is free once every occupant's last use
    // is strictly before the new tensor's production step (a layer may not
    // write over a buffer it is still reading).
    let mut region_of = vec![0usize; n];
    let mut region_end: Vec<usize> = Vec::new();
    let mut region_bytes: Vec<usize> = Vec::new();
    for t in 0..n {
        match region_end.iter().position(|&e| e < t) {
            Some(r) => {
                region_of[t] = r;
                region_end[r] = end[t];
                region_bytes[r] = region_bytes[r].max(bytes[t]);
            }
            None => {
                region_of[t] = region_end.len();
                region_end.push(end[t]);
                region_bytes.push(bytes[t]);
            }
        }
    }

    let mut offsets = Vec::with_capacity(region_bytes.len());
    let mut total = 0usize;
    for &b in &region_bytes {
        offsets.push(total);
        total += b;
    }
    let slots = (0..n)
        .map(|t| TensorSlot {
            offset: offsets[region_of[t]],
            bytes: bytes[t],
        })
        .collect();
    Ok(MemoryPlan {
        slots,
        arena_bytes: total,
        regions: region_bytes.len(),
    })
}

/// Deployment size limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Limits {
    pub budget_bytes: usize,
    /// Fixed allowance for code, stack, and runtime bookkeeping on the
    /// target, counted against the budget alongside weights and
    /// activations.
    pub overhead_bytes: usize,
}

pub const DEFAULT_BUDGET_BYTES: usize = 512 * 1024;
pub const DEFAULT_OVERHEAD_BYTES: usize = 16 * 1024;

impl Default for Limits {
    fn default() -> Self {
        Limits {
            budget_bytes: DEFAULT_BUDGET_BYTES,
            overhead_bytes: DEFAULT_OVERHEAD_BYTES,
        }
    }
}

/// What a deployed model occupies and whether it fits the budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryReport {
    pub weight_bytes: usize,
    pub peak_activation_bytes: usize,
    pub overhead_bytes: usize,
    pub total_bytes: usize,
    pub budget_bytes: usize,
    pub fits: bool,
}

pub fn memory_report(g: &IntGraph, limits: &Limits) -> Result<MemoryReport> {
    let p = plan(g)?;
    let weight_bytes = g.weights.len() + 4 * g.biases.len();
    let total_bytes = weight_bytes + p.arena_bytes + limits.overhead_bytes;
    Ok(MemoryReport {
        weight_bytes,
        peak_activation_bytes: p.arena_bytes,
        overhead_bytes: limits.overhead_bytes,
        total_bytes,
        budget_bytes: limits.budget_bytes,
        fits: total_bytes <= limits.budget_bytes,
    })
}

/// Budget gate: error (with both sizes) when the report does not fit.
pub fn require_fit(r: &MemoryReport) -> Result<()> {
    if r.fits {
        Ok(())
    } else {
        Err(Error::Budget {
            total: r.total_bytes as u64,
            budget: r.budget_bytes as u64,
        })
    }
}

/// Multiply-accumulate count over all layers with dot products.
pub fn mac_count(g: &IntGraph) -> Result<u64> {
    let shapes = g.validate()?;
    let mut macs = 0u64;
    for (layer, &shape) in g.layers.iter().zip(&shapes) {
        let out_elems = shape_elems(shape) as u64;
        macs += match layer.op {
            IntOp::Conv { c_in, k, .. } => out_elems * (c_in * k) as u64,
            IntOp::Dw { k, .. } => out_elems * k as u64,
            IntOp::Linear { in_f, .. } => out_elems * in_f as u64,
            _ => 0,
        };
    }
    Ok(macs)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{rq, small_int_graph};
    use super::super::IntLayer;
    use super::*;
    use crate::quant::QuantParams;

    fn identity_chain(len: usize) -> IntGraph {
        let layers = (0..len)
            .map(|i| IntLayer {
                op: IntOp::Identity,
                inputs: vec![if i == 0 { INPUT } else { i - 1 }],
                requant: vec![],
                zp_in: vec![0],
                zp_w: 0,
                zp_out: 0,
                out_scale: 1.0,
                w_off: 0,
                w_len: 0,
                b_off: 0,
                b_len: 0,
            })
            .collect();
        IntGraph {
            input_channels: 2,
            input_len: 16,
            input_q: QuantParams {
                scale: 1.0,
                zero_point: 0,
            },
            layers,
            weights: vec![],
            biases: vec![],
        }
    }

    #[test]
    fn chains_ping_pong_between_two_buffers() {
        for len in 2..8 {
            let p = plan(&identity_chain(len)).unwrap();
            assert_eq!(p.regions, 2, "chain of {len}");
            assert_eq!(p.arena_bytes, 64);
        }
    }

    #[test]
    fn a_layer_never_writes_over_its_own_input() {
        let p = plan(&identity_chain(1)).unwrap();
        assert_eq!(p.regions, 2);
        assert_ne!(p.slots[0].offset, p.slots[1].offset);
    }

    #[test]
    fn skip_connections_keep_the_source_alive() {
        // identity -> identity -> add(input, .) : the input tensor stays
        // live across both identities, forcing a third region.
        let mut g = identity_chain(2);
        g.layers.push(IntLayer {
            op: IntOp::Add,
            inputs: vec![INPUT, 1],
            requant: vec![rq(0.5), rq(0.5)],
            zp_in: vec![0, 0],
            zp_w: 0,
            zp_out: 0,
            out_scale: 1.0,
            w_off: 0,
            w_len: 0,
            b_off: 0,
            b_len: 0,
        });
        let p = plan(&g).unwrap();
        assert_eq!(p.regions, 3);
        assert_eq!(p.arena_bytes, 96);
        // The skip source and the add output share nothing with the two
        // identities in flight.
        assert_ne!(p.slots[0].offset, p.slots[1].offset);
        assert_ne!(p.slots[0].offset, p.slots[2].offset);
    }

    #[test]
    fn report_counts_weights_activations_and_overhead() {
        let g = small_int_graph();
        let r = memory_report(&g, &Limits::default()).unwrap();
        // 8 i8 weights + 3 i32 biases.
        assert_eq!(r.weight_bytes, 20);
        // input 8 | conv 16 | pool 8, gap 2, head 1 reuse: two regions of
        // 8 and 16 bytes.
        assert_eq!(r.peak_activation_bytes, 24);
        assert_eq!(r.total_bytes, 20 + 24 + DEFAULT_OVERHEAD_BYTES);
        assert!(r.fits);
        assert!(require_fit(&r).is_ok());
    }

    #[test]
    fn over_budget_reports_both_numbers() {
        let g = small_int_graph();
        let r = memory_report(
            &g,
            &Limits {
                budget_bytes: 32,
                overhead_bytes: 0,
            },
        )
        .unwrap();
        assert!(!r.fits);
        let err = require_fit(&r).unwrap_err().to_string();
        assert!(err.contains("44") && err.contains("32"), "{err}");
    }

    #[test]
    fn shrinking_every_tensor_shrinks_the_arena() {
        let wide = identity_chain(4);
        let mut narrow = identity_chain(4);
        narrow.input_len = 4;
        let pw = plan(&wide).unwrap();
        let pn = plan(&narrow).unwrap();
        assert_eq!(pw.regions, pn.regions);
        assert!(pn.arena_bytes < pw.arena_bytes);
    }

    #[test]
    fn mac_count_matches_hand_arithmetic() {
        // conv c_in 1, c_out 1, k 3 over length 12 gives 10 outputs:
        // 30 multiply-adds.
        let g = IntGraph {
            input_channels: 1,
            input_len: 12,
            input_q: QuantParams {
                scale: 1.0,
                zero_point: 0,
            },
            layers: vec![IntLayer {
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
                out_scale: 1.0,
                w_off: 0,
                w_len: 3,
                b_off: 0,
                b_len: 1,
            }],
            weights: vec![1, 1, 1],
            biases: vec![0],
        };
        assert_eq!(mac_count(&g).unwrap(), 30);

        // The hand-packed fixture: conv 2*8*3 = 48, linear 2.
        assert_eq!(mac_count(&small_int_graph()).unwrap(), 50);
    }
}
