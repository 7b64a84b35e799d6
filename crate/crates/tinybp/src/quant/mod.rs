//! Int8 quantization primitives: min-max affine parameters, fake-quant and
//! PaCT activation wrappers, and the fixed-point requantization encoding
//! shared with the integer runtime.
//!
//! Rounding is half-to-even everywhere in the float domain. The integer
//! requantization shift instead adds `2^(n-1)` before shifting (round half
//! up), as is conventional in fixed-point kernels; the two disagree only at
//! exact ties, which the 1-LSB equivalence tolerance absorbs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Value};

mod export;
mod qat;

pub use export::export_int_graph;
pub use qat::{
    evaluate_quant, fold_batchnorm, qat_finetune, QatConfig, QatModel, Site, ALPHA_FLOOR,
};


/// Affine int8 quantization parameters (bits = 8 implied).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn quantize_one(&self, v: f64) -> i8 {
        let q = (v / self.scale).round_ties_even() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize_one(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }

    pub fn quantize(&self, vs: &[f32]) -> Vec<i8> {
        vs.iter().map(|&v| self.quantize_one(v as f64)).collect()
    }

    pub fn dequantize(&self, qs: &[i8]) -> Vec<f32> {
        qs.iter().map(|&q| self.dequantize_one(q) as f32).collect()
    }
}

/// Min-max affine parameters over a finite value stream.
///
/// The observed range is first extended to include zero, then
/// `scale = (max - min) / 255`, `zero_point = round(-128 - min/scale)`.
/// The extension keeps the zero point inside `[-128, 127]` without clamping
/// distortion and makes 0.0 exactly representable, which padded
/// convolutions rely on. An all-zero tensor maps to scale 1, zero_point 0.
pub fn minmax_affine_params_iter(values: impl Iterator<Item = f64>) -> Result<QuantParams> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut n = 0usize;
    for v in values {
        if v.is_nan() {
            return Err(Error::Quant("NaN in tensor being quantized".into()));
        }
        if !v.is_finite() {
            return Err(Error::Quant("non-finite value in tensor being quantized".into()));
        }
        min = min.min(v);
        max = max.max(v);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Quant("cannot quantize an empty tensor".into()));
    }
    min = min.min(0.0);
    max = max.max(0.0);
    if min == max {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: 0,
        });
    }
    let scale = (max - min) / 255.0;
    let zp = (-128.0 - min / scale).round_ties_even().clamp(-128.0, 127.0) as i32;
    Ok(QuantParams {
        scale,
        zero_point: zp,
    })
}

pub fn minmax_affine_params(values: &[f32]) -> Result<QuantParams> {
    minmax_affine_params_iter(values.iter().map(|&v| v as f64))
}

/// Fake-quantize a tensor with explicit params; see `tensor::ops::fake_quant`.
pub fn fake_quant<T: Element>(x: &Value<T>, q: QuantParams) -> Result<Value<T>> {
    ops::fake_quant(x, q.scale, q.zero_point)
}

/// PaCT activation: `clamp(x, 0, alpha)` snapped to the 256-level grid of
/// step `alpha/255` (zero point 0 on the unsigned grid; stored as int8 with
/// zero point -128 at export). Gradients are straight-through: `d/dx = 1` on
/// `0 < x < alpha`, `d/dalpha = 1` where `x >= alpha`.
pub fn pact_activation<T: Element>(x: &Value<T>, alpha: &Value<T>) -> Result<Value<T>> {
    let clipped = ops::pact(x, alpha)?;
    let scale = alpha.item().to_f64() / 255.0;
    ops::quant_snap(&clipped, scale)
}

// ── fixed-point requantization ───────────────────────────────────────────

/// Normalized fixed-point multiplier: `M0 = m * 2^-n` with `m` in
/// `[2^30, 2^31)` and `n` in `[1, 62]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub m: u32,
    pub n: u32,
}

pub const REQUANT_M_MIN: u32 = 1 << 30;

/// Encode a positive real multiplier. Values with `M0 >= 1` just get a
/// smaller shift; non-positive or extreme multipliers are errors.
pub fn encode_requant(m0: f64) -> Result<Requant> {
    if !(m0 > 0.0) || !m0.is_finite() {
        return Err(Error::Quant(format!(
            "requant multiplier must be positive and finite, got {m0}"
        )));
    }
    // Normalize the mantissa into [0.5, 1); powers of two keep this exact.
    let mut mant = m0;
    let mut exp = 0i32;
    while mant >= 1.0 {
        mant /= 2.0;
        exp += 1;
    }
    while mant < 0.5 {
        mant *= 2.0;
        exp -= 1;
    }
    let mut m = (mant * (1u64 << 31) as f64).round_ties_even() as u64;
    if m == 1 << 31 {
        m = 1 << 30;
        exp += 1;
    }
    let n = 31 - exp;
    if !(1..=62).contains(&n) {
        return Err(Error::Quant(format!(
            "requant multiplier {m0} needs shift n = {n}, outside [1, 62]"
        )));
    }
    Ok(Requant {
        m: m as u32,
        n: n as u32,
    })
}

pub fn decode_requant(r: Requant) -> f64 {
    r.m as f64 * (-(r.n as f64)).exp2()
}

/// Integer requantization: `(acc * m + 2^(n-1)) >> n`, truncated to i32 with
/// wraparound, exactly like the emitted C.
#[inline]
pub fn apply_requant(acc: i32, r: Requant) -> i32 {
    (((acc as i64) * (r.m as i64) + (1i64 << (r.n - 1))) >> r.n) as i32
}

pub fn validate_requant(r: Requant) -> Result<()> {
    if r.m < REQUANT_M_MIN {
        return Err(Error::Quant(format!(
            "requant multiplier {} below 2^30; not normalized",
            r.m
        )));
    }
    if !(1..=62).contains(&r.n) {
        return Err(Error::Quant(format!("requant shift {} outside [1, 62]", r.n)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minmax_on_skewed_range() {
        let q = minmax_affine_params(&[-1.0, 0.5, 3.0]).unwrap();
        assert!((q.scale - 4.0 / 255.0).abs() < 1e-12);
        assert_eq!(q.zero_point, -64);
        assert_eq!(q.quantize_one(0.0), -64);
        assert_eq!(q.dequantize_one(-64), 0.0);
    }

    #[test]
    fn minmax_symmetric_range_zero_point() {
        // -128 - (-1)/(2/255) = -0.5, which rounds to 0 half-to-even.
        let q = minmax_affine_params(&[-1.0, 1.0]).unwrap();
        assert_eq!(q.zero_point, 0);
    }

    #[test]
    fn minmax_degenerate_constants() {
        let q = minmax_affine_params(&[0.0, 0.0]).unwrap();
        assert_eq!((q.scale, q.zero_point), (1.0, 0));
        assert_eq!(q.dequantize_one(q.quantize_one(0.0)), 0.0);

        // Constants sit at one end of the zero-extended range; both the
        // constant and zero round-trip exactly.
        let q = minmax_affine_params(&[2.5, 2.5]).unwrap();
        assert_eq!(q.zero_point, -128);
        assert_eq!(q.dequantize_one(q.quantize_one(2.5)), 2.5);
        assert_eq!(q.dequantize_one(q.quantize_one(0.0)), 0.0);

        let q = minmax_affine_params(&[-0.75]).unwrap();
        assert_eq!(q.zero_point, 127);
        assert_eq!(q.dequantize_one(q.quantize_one(-0.75)), -0.75);
    }

    #[test]
    fn minmax_ranges_missing_zero_still_represent_it() {
        // A regression head can emit values in a band away from zero; the
        // zero point must stay in int8 range and keep 0.0 on the grid.
        let q = minmax_affine_params(&[0.59, 0.74]).unwrap();
        assert!((-128..=127).contains(&q.zero_point));
        assert_eq!(q.dequantize_one(q.quantize_one(0.0)), 0.0);
        assert!((q.dequantize_one(q.quantize_one(0.7)) - 0.7).abs() <= q.scale / 2.0);

        let q = minmax_affine_params(&[-3.0, -2.0]).unwrap();
        assert_eq!(q.zero_point, 127);
        assert!((q.dequantize_one(q.quantize_one(-2.4)) + 2.4).abs() <= q.scale / 2.0);
    }

    #[test]
    fn minmax_rejects_nan_and_empty() {
        assert!(minmax_affine_params(&[1.0, f32::NAN]).is_err());
        assert!(minmax_affine_params(&[]).is_err());
        assert!(minmax_affine_params(&[1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn fake_quant_error_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0..3.0)).collect();
        let q = minmax_affine_params(&vals).unwrap();
        let x = Tensor::constant(&[vals.len()], vals.clone()).unwrap();
        let y = fake_quant(&x, q).unwrap();
        for (orig, dq) in vals.iter().zip(y.data().iter()) {
            assert!(
                (orig - dq).abs() as f64 <= q.scale / 2.0 + 1e-7,
                "{orig} vs {dq}"
            );
        }
    }

    #[test]
    fn pact_matches_spec_examples() {
        let alpha = Tensor::leaf(&[1], vec![6.0f32], true).unwrap();
        let x = Tensor::leaf(&[2], vec![7.5f32, -1.0], true).unwrap();
        let y = pact_activation(&x, &alpha).unwrap();
        assert!((y.data()[0] - 6.0).abs() < 1e-6);
        assert_eq!(y.data()[1], 0.0);
        let loss = ops::sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(alpha.grad().unwrap(), vec![1.0]);
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);

        // alpha = 2.55 puts x = 1.0 exactly on the 0.01 grid.
        let alpha = Tensor::leaf(&[1], vec![2.55f32], true).unwrap();
        let x = Tensor::leaf(&[1], vec![1.0f32], true).unwrap();
        let y = pact_activation(&x, &alpha).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pact_output_stays_inside_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let alpha = Tensor::leaf(&[1], vec![1.5f32], true).unwrap();
        let vals: Vec<f32> = (0..256).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x = Tensor::constant(&[vals.len()], vals).unwrap();
        let y = pact_activation(&x, &alpha).unwrap();
        for &v in y.data().iter() {
            assert!((0.0..=1.5 + 1e-6).contains(&v));
        }
    }

    #[test]
    fn requant_encoding_frozen_points() {
        assert_eq!(encode_requant(0.5).unwrap(), Requant { m: 1 << 30, n: 31 });
        assert_eq!(encode_requant(0.25).unwrap(), Requant { m: 1 << 30, n: 32 });
        // M0 >= 1 reduces the shift instead of failing.
        assert_eq!(encode_requant(1.0).unwrap(), Requant { m: 1 << 30, n: 30 });
        assert!(encode_requant(0.0).is_err());
        assert!(encode_requant(-0.5).is_err());
        assert!(encode_requant(f64::NAN).is_err());
        assert!(encode_requant(1e-12).is_err());
    }

    #[test]
    fn requant_roundtrip_within_2_pow_30() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let m0 = (10.0f64).powf(rng.random_range(-6.0..2.0));
            let r = encode_requant(m0).unwrap();
            validate_requant(r).unwrap();
            let back = decode_requant(r);
            assert!(
                ((back - m0) / m0).abs() <= (2.0f64).powi(-30),
                "{m0} -> {back}"
            );
        }
    }

    #[test]
    fn requant_shift_is_monotone_in_acc() {
        let r = encode_requant(0.0037).unwrap();
        let mut prev = i32::MIN;
        for acc in (-100_000..100_000).step_by(997) {
            let out = apply_requant(acc, r);
            assert!(out >= prev);
            prev = out;
        }
    }

    #[test]
    fn requant_examples_match_hand_arithmetic() {
        // acc = 6, M0 = 0.5: (6 * 2^30 + 2^30) >> 31 = 3.
        let r = encode_requant(0.5).unwrap();
        assert_eq!(apply_requant(6, r), 3);
        // Negative accumulators round toward +inf at ties, matching C.
        assert_eq!(apply_requant(-5, r), -2);
    }
}
