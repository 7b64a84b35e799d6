//! Central finite-difference gradient checking, used by the test suite and
//! by `selftest`.
//!
//! The builder closure must construct a fresh scalar loss from the given
//! leaves on every call; the checker runs it once for the analytic backward
//! pass and then twice per element for the central difference. Inputs must
//! be positioned away from non-differentiable boundaries (ReLU kinks, max
//! ties, rounding steps) by more than the probe step; that is the caller's
//! responsibility.

use crate::error::{Error, Result};
use crate::tensor::{backward, Tensor, Value};

/// Default central-difference step. Truncation error is O(h^2) and f64
/// rounding error is O(1e-16 / h); 1e-4 balances both well below the 1e-3
/// acceptance tolerance.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative error floor: gradients smaller than this compare absolutely.
pub const DENOM_FLOOR: f64 = 1e-2;

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `build` against central differences for
/// every element of every leaf. Returns the worst relative error, where
/// `rel = |analytic - fd| / max(|analytic|, |fd|, DENOM_FLOOR)`.
pub fn finite_diff_check<F>(leaves: &[Value<f64>], build: F) -> Result<GradReport>
where
    F: Fn(&[Value<f64>]) -> Result<Value<f64>>,
{
    finite_diff_check_step(leaves, build, DEFAULT_STEP)
}

pub fn finite_diff_check_step<F>(leaves: &[Value<f64>], build: F, h: f64) -> Result<GradReport>
where
    F: Fn(&[Value<f64>]) -> Result<Value<f64>>,
{
    for (i, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            return Err(Error::Autodiff(format!(
                "finite_diff_check leaf {i} does not require grad"
            )));
        }
        leaf.zero_grad();
    }

    let loss = build(leaves)?;
    if loss.len() != 1 {
        return Err(Error::Autodiff("loss must be scalar".into()));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let orig = leaf.data().clone();
        for j in 0..orig.len() {
            let mut probe = orig.clone();
            probe[j] = orig[j] + h;
            leaf.set_data(&probe);
            let up = build(leaves)?.item();
            probe[j] = orig[j] - h;
            leaf.set_data(&probe);
            let down = build(leaves)?.item();
            leaf.set_data(&orig);

            let fd = (up - down) / (2.0 * h);
            let a = analytic[li][j];
            if !fd.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient comparison at leaf {li} elem {j}: analytic {a}, fd {fd}"
                )));
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_err: max_rel,
        checked,
    })
}

/// Leaf filled from an rng in `[-1, 1)`, for gradient-check instances.
pub fn random_leaf(rng: &mut impl rand::Rng, shape: &[usize]) -> Value<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::leaf(shape, data, true).expect("shape/data agree by construction")
}

/// Push every element at least `dist` away from the nearest multiple of
/// `step` plus `offset`, so finite differences never straddle a rounding or
/// clipping boundary.
pub fn nudge_off_boundaries(leaf: &Value<f64>, step: f64, offset: f64, dist: f64) {
    let mut data = leaf.data().clone();
    for v in data.iter_mut() {
        let pos = (*v - offset) / step;
        let frac = pos - pos.floor();
        if frac < dist / step {
            *v += dist;
        } else if frac > 1.0 - dist / step {
            *v -= dist;
        }
    }
    leaf.set_data(&data);
}
