//! Differentiable ops over `[N, C, L]` series, `[N, F]` vectors and scalars.
//!
//! Data layout is row-major: series index `(n, c, l)` flattens to
//! `(n * C + c) * L + l`. Every op validates shapes up front and registers a
//! backward closure; closures read parent data through the tape instead of
//! keeping copies unless the forward pass computed something worth saving
//! (max indices, batch statistics).

use super::{Element, Tensor, Value};
use crate::error::{Error, Result};

// ── shape helpers ────────────────────────────────────────────────────────

fn dims3<T: Element>(x: &Value<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, l] => Ok((n, c, l)),
        ref s => Err(Error::Shape(format!("{what} must be [N, C, L], got {s:?}"))),
    }
}

fn dims2<T: Element>(x: &Value<T>, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, f] => Ok((n, f)),
        ref s => Err(Error::Shape(format!("{what} must be [N, F], got {s:?}"))),
    }
}

fn overflow() -> Error {
    Error::Invalid("dimension arithmetic overflow".into())
}

/// `L_out = (L_in + 2*padding - K) / stride + 1`, floor division.
pub fn conv_out_len(l_in: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("kernel size must be >= 1".into()));
    }
    let padded = l_in
        .checked_add(padding.checked_mul(2).ok_or_else(overflow)?)
        .ok_or_else(overflow)?;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} longer than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid `l_out` index span for kernel tap `k` of a conv, so the inner loop
/// never branches on padding.
fn tap_span(l_in: usize, l_out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo_min = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let num = l_in as isize - 1 + padding as isize - k as isize;
    if num < 0 {
        return (0, 0);
    }
    let lo_max = (num as usize / stride + 1).min(l_out);
    (lo_min, lo_max.max(lo_min))
}

// ── elementwise ──────────────────────────────────────────────────────────

pub fn add<T: Element>(a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|parents, g| {
            parents
                .iter()
                .map(|p| p.needs_grad.then(|| g.to_vec()))
                .collect()
        }),
    ))
}

pub fn mul<T: Element>(a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|parents, g| {
            let da = parents[0].needs_grad.then(|| {
                let bd = parents[1].data();
                g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect()
            });
            let db = parents[1].needs_grad.then(|| {
                let ad = parents[0].data();
                g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect()
            });
            vec![da, db]
        }),
    ))
}

/// `c * x` for a compile-time constant factor.
pub fn scale<T: Element>(x: &Value<T>, c: T) -> Result<Value<T>> {
    let data = x.data().iter().map(|&v| v * c).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0]
                .needs_grad
                .then(|| g.iter().map(|&gi| gi * c).collect())]
        }),
    ))
}

/// `ca * a + cb * b` with constant coefficients; the loss combiner.
pub fn add_scaled<T: Element>(a: &Value<T>, ca: T, b: &Value<T>, cb: T) -> Result<Value<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add_scaled shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * ca + y * cb)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |parents, g| {
            vec![
                parents[0]
                    .needs_grad
                    .then(|| g.iter().map(|&gi| gi * ca).collect()),
                parents[1]
                    .needs_grad
                    .then(|| g.iter().map(|&gi| gi * cb).collect()),
            ]
        }),
    ))
}

pub fn relu<T: Element>(x: &Value<T>) -> Result<Value<T>> {
    let data = x.data().iter().map(|&v| v.maximum(T::ZERO)).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let xd = parents[0].data();
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > T::ZERO { gi } else { T::ZERO })
                    .collect()
            })]
        }),
    ))
}

/// Sum of all elements, as a scalar.
pub fn sum<T: Element>(x: &Value<T>) -> Result<Value<T>> {
    let mut acc = T::ZERO;
    for &v in x.data().iter() {
        acc += v;
    }
    let len = x.len();
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        vec![x.clone()],
        Box::new(move |parents, g| vec![parents[0].needs_grad.then(|| vec![g[0]; len])]),
    ))
}

/// Drop trailing samples: `[N, C, L] -> [N, C, new_len]`.
pub fn trim_tail<T: Element>(x: &Value<T>, new_len: usize) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "trim_tail input")?;
    if new_len == 0 || new_len > l {
        return Err(Error::Shape(format!(
            "trim_tail to {new_len} out of range for L = {l}"
        )));
    }
    let xd = x.data();
    let mut y = Vec::with_capacity(n * c * new_len);
    for nc in 0..n * c {
        let base = nc * l;
        y.extend_from_slice(&xd[base..base + new_len]);
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, c, new_len],
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l];
                for nc in 0..n * c {
                    dx[nc * l..nc * l + new_len].copy_from_slice(&g[nc * new_len..(nc + 1) * new_len]);
                }
                dx
            })]
        }),
    ))
}

// ── convolutions ─────────────────────────────────────────────────────────

/// 1-D cross-correlation with zero padding.
///
/// `x: [N, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]`.
pub fn conv1d<T: Element>(
    x: &Value<T>,
    w: &Value<T>,
    b: Option<&Value<T>>,
    stride: usize,
    padding: usize,
) -> Result<Value<T>> {
    let (n, c_in, l_in) = dims3(x, "conv1d input")?;
    let (c_out, wc_in, k) = dims3(w, "conv1d weight")?;
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d expects weight C_in {wc_in} == input C_in {c_in}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv1d bias must be [{c_out}], got {:?}",
                b.shape()
            )));
        }
    }
    let l_out = conv_out_len(l_in, k, stride, padding)?;

    let mut y = vec![T::ZERO; n * c_out * l_out];
    {
        let xd = x.data();
        let wd = w.data();
        for nn in 0..n {
            for co in 0..c_out {
                let y_base = (nn * c_out + co) * l_out;
                if let Some(b) = b {
                    let bv = b.data()[co];
                    y[y_base..y_base + l_out].iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..c_in {
                    let x_base = (nn * c_in + ci) * l_in;
                    let w_base = (co * c_in + ci) * k;
                    for kk in 0..k {
                        let wv = wd[w_base + kk];
                        let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                        let mut t = (lo_min * stride + kk) as isize - padding as isize;
                        for lo in lo_min..lo_max {
                            y[y_base + lo] += wv * xd[x_base + t as usize];
                            t += stride as isize;
                        }
                    }
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(Tensor::from_op(
        vec![n, c_out, l_out],
        y,
        parents,
        Box::new(move |parents, g| {
            let x = &parents[0];
            let w = &parents[1];
            let xd = x.data();
            let wd = w.data();
            let dx = x.needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c_in * l_in];
                for nn in 0..n {
                    for co in 0..c_out {
                        let y_base = (nn * c_out + co) * l_out;
                        for ci in 0..c_in {
                            let x_base = (nn * c_in + ci) * l_in;
                            let w_base = (co * c_in + ci) * k;
                            for kk in 0..k {
                                let wv = wd[w_base + kk];
                                let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                                let mut t = (lo_min * stride + kk) as isize - padding as isize;
                                for lo in lo_min..lo_max {
                                    dx[x_base + t as usize] += wv * g[y_base + lo];
                                    t += stride as isize;
                                }
                            }
                        }
                    }
                }
                dx
            });
            let dw = w.needs_grad.then(|| {
                let mut dw = vec![T::ZERO; c_out * c_in * k];
                for nn in 0..n {
                    for co in 0..c_out {
                        let y_base = (nn * c_out + co) * l_out;
                        for ci in 0..c_in {
                            let x_base = (nn * c_in + ci) * l_in;
                            let w_base = (co * c_in + ci) * k;
                            for kk in 0..k {
                                let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                                let mut t = (lo_min * stride + kk) as isize - padding as isize;
                                let mut acc = T::ZERO;
                                for lo in lo_min..lo_max {
                                    acc += xd[x_base + t as usize] * g[y_base + lo];
                                    t += stride as isize;
                                }
                                dw[w_base + kk] += acc;
                            }
                        }
                    }
                }
                dw
            });
            let mut out = vec![dx, dw];
            if has_bias {
                let db = parents[2].needs_grad.then(|| {
                    let mut db = vec![T::ZERO; c_out];
                    for nn in 0..n {
                        for co in 0..c_out {
                            let y_base = (nn * c_out + co) * l_out;
                            for lo in 0..l_out {
                                db[co] += g[y_base + lo];
                            }
                        }
                    }
                    db
                });
                out.push(db);
            }
            out
        }),
    ))
}

/// Depthwise 1-D cross-correlation: one kernel per channel.
///
/// `x: [N, C, L]`, `w: [C, 1, K]`, `b: [C]`.
pub fn depthwise_conv1d<T: Element>(
    x: &Value<T>,
    w: &Value<T>,
    b: Option<&Value<T>>,
    stride: usize,
    padding: usize,
) -> Result<Value<T>> {
    let (n, c, l_in) = dims3(x, "depthwise input")?;
    let (wc, one, k) = dims3(w, "depthwise weight")?;
    if wc != c || one != 1 {
        return Err(Error::Shape(format!(
            "depthwise weight must be [{c}, 1, K], got {:?}",
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "depthwise bias must be [{c}], got {:?}",
                b.shape()
            )));
        }
    }
    let l_out = conv_out_len(l_in, k, stride, padding)?;

    let mut y = vec![T::ZERO; n * c * l_out];
    {
        let xd = x.data();
        let wd = w.data();
        for nn in 0..n {
            for cc in 0..c {
                let y_base = (nn * c + cc) * l_out;
                let x_base = (nn * c + cc) * l_in;
                if let Some(b) = b {
                    let bv = b.data()[cc];
                    y[y_base..y_base + l_out].iter_mut().for_each(|v| *v = bv);
                }
                for kk in 0..k {
                    let wv = wd[cc * k + kk];
                    let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                    let mut t = (lo_min * stride + kk) as isize - padding as isize;
                    for lo in lo_min..lo_max {
                        y[y_base + lo] += wv * xd[x_base + t as usize];
                        t += stride as isize;
                    }
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(Tensor::from_op(
        vec![n, c, l_out],
        y,
        parents,
        Box::new(move |parents, g| {
            let x = &parents[0];
            let w = &parents[1];
            let xd = x.data();
            let wd = w.data();
            let dx = x.needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l_in];
                for nn in 0..n {
                    for cc in 0..c {
                        let y_base = (nn * c + cc) * l_out;
                        let x_base = (nn * c + cc) * l_in;
                        for kk in 0..k {
                            let wv = wd[cc * k + kk];
                            let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                            let mut t = (lo_min * stride + kk) as isize - padding as isize;
                            for lo in lo_min..lo_max {
                                dx[x_base + t as usize] += wv * g[y_base + lo];
                                t += stride as isize;
                            }
                        }
                    }
                }
                dx
            });
            let dw = w.needs_grad.then(|| {
                let mut dw = vec![T::ZERO; c * k];
                for nn in 0..n {
                    for cc in 0..c {
                        let y_base = (nn * c + cc) * l_out;
                        let x_base = (nn * c + cc) * l_in;
                        for kk in 0..k {
                            let (lo_min, lo_max) = tap_span(l_in, l_out, kk, stride, padding);
                            let mut t = (lo_min * stride + kk) as isize - padding as isize;
                            let mut acc = T::ZERO;
                            for lo in lo_min..lo_max {
                                acc += xd[x_base + t as usize] * g[y_base + lo];
                                t += stride as isize;
                            }
                            dw[cc * k + kk] += acc;
                        }
                    }
                }
                dw
            });
            let mut out = vec![dx, dw];
            if has_bias {
                let db = parents[2].needs_grad.then(|| {
                    let mut db = vec![T::ZERO; c];
                    for nn in 0..n {
                        for cc in 0..c {
                            let y_base = (nn * c + cc) * l_out;
                            for lo in 0..l_out {
                                db[cc] += g[y_base + lo];
                            }
                        }
                    }
                    db
                });
                out.push(db);
            }
            out
        }),
    ))
}

/// `y = x w^T + b` with `x: [N, F]`, `w: [O, F]`, `b: [O]`.
pub fn linear<T: Element>(x: &Value<T>, w: &Value<T>, b: Option<&Value<T>>) -> Result<Value<T>> {
    let (n, f) = dims2(x, "linear input")?;
    let (o, wf) = dims2(w, "linear weight")?;
    if wf != f {
        return Err(Error::Shape(format!(
            "linear expects weight F {wf} == input F {f}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "linear bias must be [{o}], got {:?}",
                b.shape()
            )));
        }
    }
    let mut y = vec![T::ZERO; n * o];
    {
        let xd = x.data();
        let wd = w.data();
        for nn in 0..n {
            for oo in 0..o {
                let mut acc = match b {
                    Some(b) => b.data()[oo],
                    None => T::ZERO,
                };
                for ff in 0..f {
                    acc += xd[nn * f + ff] * wd[oo * f + ff];
                }
                y[nn * o + oo] = acc;
            }
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(Tensor::from_op(
        vec![n, o],
        y,
        parents,
        Box::new(move |parents, g| {
            let xd = parents[0].data();
            let wd = parents[1].data();
            let dx = parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * f];
                for nn in 0..n {
                    for oo in 0..o {
                        let gv = g[nn * o + oo];
                        for ff in 0..f {
                            dx[nn * f + ff] += gv * wd[oo * f + ff];
                        }
                    }
                }
                dx
            });
            let dw = parents[1].needs_grad.then(|| {
                let mut dw = vec![T::ZERO; o * f];
                for nn in 0..n {
                    for oo in 0..o {
                        let gv = g[nn * o + oo];
                        for ff in 0..f {
                            dw[oo * f + ff] += gv * xd[nn * f + ff];
                        }
                    }
                }
                dw
            });
            let mut out = vec![dx, dw];
            if has_bias {
                let db = parents[2].needs_grad.then(|| {
                    let mut db = vec![T::ZERO; o];
                    for nn in 0..n {
                        for oo in 0..o {
                            db[oo] += g[nn * o + oo];
                        }
                    }
                    db
                });
                out.push(db);
            }
            out
        }),
    ))
}

// ── batch normalization ──────────────────────────────────────────────────

/// Training-mode batch norm over `[N, C, L]`, normalizing each channel across
/// `N * L`. Returns the output plus the biased batch statistics so the caller
/// can update running stats. Variance is biased (divide by `N * L`) in both
/// the normalization and the returned stats.
pub fn batchnorm_train<T: Element>(
    x: &Value<T>,
    gamma: &Value<T>,
    beta: &Value<T>,
    eps: T,
) -> Result<(Value<T>, Vec<T>, Vec<T>)> {
    let (n, c, l) = dims3(x, "batchnorm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm gamma/beta must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = n * l;
    let m_t = T::from_usize(m);

    let mut mu = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    let mut y = vec![T::ZERO; n * c * l];
    {
        let xd = x.data();
        for cc in 0..c {
            let mut s = T::ZERO;
            for nn in 0..n {
                let base = (nn * c + cc) * l;
                for ll in 0..l {
                    s += xd[base + ll];
                }
            }
            let mean = s / m_t;
            let mut v = T::ZERO;
            for nn in 0..n {
                let base = (nn * c + cc) * l;
                for ll in 0..l {
                    let d = xd[base + ll] - mean;
                    v += d * d;
                }
            }
            mu[cc] = mean;
            var[cc] = v / m_t;
        }
        let gd = gamma.data();
        let bd = beta.data();
        for nn in 0..n {
            for cc in 0..c {
                let ivar = T::ONE / (var[cc] + eps).sqrt();
                let base = (nn * c + cc) * l;
                for ll in 0..l {
                    y[base + ll] = gd[cc] * (xd[base + ll] - mu[cc]) * ivar + bd[cc];
                }
            }
        }
    }

    let mu_saved = mu.clone();
    let var_saved = var.clone();
    let out = Tensor::from_op(
        vec![n, c, l],
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |parents, g| {
            let xd = parents[0].data();
            let gd = parents[1].data();
            let mut dx = parents[0].needs_grad.then(|| vec![T::ZERO; n * c * l]);
            let mut dgamma = parents[1].needs_grad.then(|| vec![T::ZERO; c]);
            let mut dbeta = parents[2].needs_grad.then(|| vec![T::ZERO; c]);
            for cc in 0..c {
                let ivar = T::ONE / (var_saved[cc] + eps).sqrt();
                let mut sum_g = T::ZERO;
                let mut sum_gx = T::ZERO;
                for nn in 0..n {
                    let base = (nn * c + cc) * l;
                    for ll in 0..l {
                        let gi = g[base + ll];
                        let xhat = (xd[base + ll] - mu_saved[cc]) * ivar;
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                }
                if let Some(dg) = dgamma.as_mut() {
                    dg[cc] = sum_gx;
                }
                if let Some(db) = dbeta.as_mut() {
                    db[cc] = sum_g;
                }
                if let Some(dx) = dx.as_mut() {
                    let coef = gd[cc] * ivar / m_t;
                    for nn in 0..n {
                        let base = (nn * c + cc) * l;
                        for ll in 0..l {
                            let gi = g[base + ll];
                            let xhat = (xd[base + ll] - mu_saved[cc]) * ivar;
                            dx[base + ll] = coef * (m_t * gi - sum_g - xhat * sum_gx);
                        }
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }),
    );
    Ok((out, mu, var))
}

/// Inference-mode batch norm with fixed running statistics.
pub fn batchnorm_eval<T: Element>(
    x: &Value<T>,
    gamma: &Value<T>,
    beta: &Value<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "batchnorm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm eval parameter length mismatch for C = {c}"
        )));
    }
    let ivar: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let mut y = vec![T::ZERO; n * c * l];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * l;
                for ll in 0..l {
                    y[base + ll] = gd[cc] * (xd[base + ll] - mean[cc]) * ivar[cc] + bd[cc];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, l],
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |parents, g| {
            let xd = parents[0].data();
            let gd = parents[1].data();
            let dx = parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * l;
                        let coef = gd[cc] * ivar[cc];
                        for ll in 0..l {
                            dx[base + ll] = g[base + ll] * coef;
                        }
                    }
                }
                dx
            });
            let dgamma = parents[1].needs_grad.then(|| {
                let mut dg = vec![T::ZERO; c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * l;
                        for ll in 0..l {
                            dg[cc] += g[base + ll] * (xd[base + ll] - mean[cc]) * ivar[cc];
                        }
                    }
                }
                dg
            });
            let dbeta = parents[2].needs_grad.then(|| {
                let mut db = vec![T::ZERO; c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * l;
                        for ll in 0..l {
                            db[cc] += g[base + ll];
                        }
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        }),
    ))
}

// ── pooling and resizing ─────────────────────────────────────────────────

/// Max pool, no padding: `L_out = (L - k) / stride + 1`. Ties take the
/// earliest index.
pub fn maxpool1d<T: Element>(x: &Value<T>, k: usize, stride: usize) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "maxpool input")?;
    if k == 0 || stride == 0 {
        return Err(Error::Invalid("maxpool k and stride must be >= 1".into()));
    }
    if l < k {
        return Err(Error::Shape(format!("maxpool window {k} exceeds L = {l}")));
    }
    let l_out = (l - k) / stride + 1;
    let mut y = vec![T::ZERO; n * c * l_out];
    let mut argmax = vec![0usize; n * c * l_out];
    {
        let xd = x.data();
        for nc in 0..n * c {
            let x_base = nc * l;
            let y_base = nc * l_out;
            for lo in 0..l_out {
                let start = lo * stride;
                let mut best = xd[x_base + start];
                let mut best_i = x_base + start;
                for kk in 1..k {
                    let v = xd[x_base + start + kk];
                    if v > best {
                        best = v;
                        best_i = x_base + start + kk;
                    }
                }
                y[y_base + lo] = best;
                argmax[y_base + lo] = best_i;
            }
        }
    }
    let total_in = n * c * l;
    Ok(Tensor::from_op(
        vec![n, c, l_out],
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; total_in];
                for (i, &gi) in g.iter().enumerate() {
                    dx[argmax[i]] += gi;
                }
                dx
            })]
        }),
    ))
}

/// Average pool, no padding.
pub fn avgpool1d<T: Element>(x: &Value<T>, k: usize, stride: usize) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "avgpool input")?;
    if k == 0 || stride == 0 {
        return Err(Error::Invalid("avgpool k and stride must be >= 1".into()));
    }
    if l < k {
        return Err(Error::Shape(format!("avgpool window {k} exceeds L = {l}")));
    }
    let l_out = (l - k) / stride + 1;
    let inv_k = T::ONE / T::from_usize(k);
    let mut y = vec![T::ZERO; n * c * l_out];
    {
        let xd = x.data();
        for nc in 0..n * c {
            let x_base = nc * l;
            let y_base = nc * l_out;
            for lo in 0..l_out {
                let mut acc = T::ZERO;
                for kk in 0..k {
                    acc += xd[x_base + lo * stride + kk];
                }
                y[y_base + lo] = acc * inv_k;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, l_out],
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l];
                for nc in 0..n * c {
                    let x_base = nc * l;
                    let y_base = nc * l_out;
                    for lo in 0..l_out {
                        let gv = g[y_base + lo] * inv_k;
                        for kk in 0..k {
                            dx[x_base + lo * stride + kk] += gv;
                        }
                    }
                }
                dx
            })]
        }),
    ))
}

/// Mean over the length axis: `[N, C, L] -> [N, C]`.
pub fn global_avg_pool<T: Element>(x: &Value<T>) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "global_avg_pool input")?;
    let inv_l = T::ONE / T::from_usize(l);
    let mut y = vec![T::ZERO; n * c];
    {
        let xd = x.data();
        for nc in 0..n * c {
            let mut acc = T::ZERO;
            for ll in 0..l {
                acc += xd[nc * l + ll];
            }
            y[nc] = acc * inv_l;
        }
    }
    Ok(Tensor::from_op(
        vec![n, c],
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l];
                for nc in 0..n * c {
                    let gv = g[nc] * inv_l;
                    for ll in 0..l {
                        dx[nc * l + ll] = gv;
                    }
                }
                dx
            })]
        }),
    ))
}

/// Nearest-neighbour upsampling along the length axis.
pub fn upsample_nearest<T: Element>(x: &Value<T>, factor: usize) -> Result<Value<T>> {
    let (n, c, l) = dims3(x, "upsample input")?;
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    let l_out = l * factor;
    let mut y = vec![T::ZERO; n * c * l_out];
    {
        let xd = x.data();
        for nc in 0..n * c {
            for lo in 0..l_out {
                y[nc * l_out + lo] = xd[nc * l + lo / factor];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, l_out],
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dx = vec![T::ZERO; n * c * l];
                for nc in 0..n * c {
                    for lo in 0..l_out {
                        dx[nc * l + lo / factor] += g[nc * l_out + lo];
                    }
                }
                dx
            })]
        }),
    ))
}

/// Concatenate along the channel axis; all inputs share `N` and `L`.
pub fn concat_channels<T: Element>(xs: &[Value<T>]) -> Result<Value<T>> {
    if xs.len() < 2 {
        return Err(Error::Shape("concat needs at least two inputs".into()));
    }
    let (n, c0, l) = dims3(&xs[0], "concat input")?;
    let mut channels = vec![c0];
    for x in &xs[1..] {
        let (nn, cc, ll) = dims3(x, "concat input")?;
        if nn != n || ll != l {
            return Err(Error::Shape(format!(
                "concat inputs must agree on N and L: [{n}, _, {l}] vs {:?}",
                x.shape()
            )));
        }
        channels.push(cc);
    }
    let c_total: usize = channels.iter().sum();
    let mut y = vec![T::ZERO; n * c_total * l];
    for nn in 0..n {
        let mut c_off = 0;
        for (x, &cx) in xs.iter().zip(&channels) {
            let xd = x.data();
            for cc in 0..cx {
                let src = (nn * cx + cc) * l;
                let dst = (nn * c_total + c_off + cc) * l;
                y[dst..dst + l].copy_from_slice(&xd[src..src + l]);
            }
            c_off += cx;
        }
    }
    Ok(Tensor::from_op(
        vec![n, c_total, l],
        y,
        xs.to_vec(),
        Box::new(move |parents, g| {
            let mut out = Vec::with_capacity(parents.len());
            let mut c_off = 0;
            for (p, &cx) in parents.iter().zip(&channels) {
                let dxi = p.needs_grad.then(|| {
                    let mut dx = vec![T::ZERO; n * cx * l];
                    for nn in 0..n {
                        for cc in 0..cx {
                            let dst = (nn * cx + cc) * l;
                            let src = (nn * c_total + c_off + cc) * l;
                            dx[dst..dst + l].copy_from_slice(&g[src..src + l]);
                        }
                    }
                    dx
                });
                out.push(dxi);
                c_off += cx;
            }
            out
        }),
    ))
}

// ── losses and reductions ────────────────────────────────────────────────

/// Mean squared error over all elements, as a scalar.
pub fn mse<T: Element>(pred: &Value<T>, target: &Value<T>) -> Result<Value<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let len = pred.len();
    let inv = T::ONE / T::from_usize(len);
    let mut acc = T::ZERO;
    {
        let pd = pred.data();
        let td = target.data();
        for i in 0..len {
            let d = pd[i] - td[i];
            acc += d * d;
        }
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![acc * inv],
        vec![pred.clone(), target.clone()],
        Box::new(move |parents, g| {
            let two = T::from_f64(2.0);
            let pd = parents[0].data();
            let td = parents[1].data();
            let dp = parents[0].needs_grad.then(|| {
                (0..len)
                    .map(|i| two * (pd[i] - td[i]) * inv * g[0])
                    .collect()
            });
            let dt = parents[1].needs_grad.then(|| {
                (0..len)
                    .map(|i| -two * (pd[i] - td[i]) * inv * g[0])
                    .collect()
            });
            vec![dp, dt]
        }),
    ))
}

/// Numerically stable softmax over a 1-D tensor.
pub fn softmax<T: Element>(x: &Value<T>) -> Result<Value<T>> {
    if x.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "softmax expects a 1-D tensor, got {:?}",
            x.shape()
        )));
    }
    let xd = x.data().clone();
    let mut max = xd[0];
    for &v in &xd[1..] {
        max = max.maximum(v);
    }
    let exps: Vec<T> = xd.iter().map(|&v| (v - max).exp()).collect();
    let mut z = T::ZERO;
    for &e in &exps {
        z += e;
    }
    let y: Vec<T> = exps.iter().map(|&e| e / z).collect();
    let y_saved = y.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let mut dot = T::ZERO;
                for (gi, yi) in g.iter().zip(&y_saved) {
                    dot += *gi * *yi;
                }
                g.iter()
                    .zip(&y_saved)
                    .map(|(&gi, &yi)| yi * (gi - dot))
                    .collect()
            })]
        }),
    ))
}

/// Mixture op: `y = sum_i s_i * x_i` with a weight vector `s: [k]` and `k`
/// equally shaped items. `dy/dx_i = s_i * g`, `dy/ds_i = sum(g * x_i)`.
pub fn weighted_sum<T: Element>(weights: &Value<T>, items: &[Value<T>]) -> Result<Value<T>> {
    if weights.shape() != [items.len()] {
        return Err(Error::Shape(format!(
            "weighted_sum expects weights [{}], got {:?}",
            items.len(),
            weights.shape()
        )));
    }
    if items.is_empty() {
        return Err(Error::Shape("weighted_sum needs at least one item".into()));
    }
    let shape = items[0].shape().to_vec();
    for it in items {
        if it.shape() != shape {
            return Err(Error::Shape(format!(
                "weighted_sum item shapes differ: {:?} vs {:?}",
                shape,
                it.shape()
            )));
        }
    }
    let len: usize = shape.iter().product();
    let mut y = vec![T::ZERO; len];
    {
        let sd = weights.data();
        for (i, it) in items.iter().enumerate() {
            let xd = it.data();
            let s = sd[i];
            for (yv, &xv) in y.iter_mut().zip(xd.iter()) {
                *yv += s * xv;
            }
        }
    }
    let mut parents = vec![weights.clone()];
    parents.extend(items.iter().cloned());
    let k = items.len();
    Ok(Tensor::from_op(
        shape,
        y,
        parents,
        Box::new(move |parents, g| {
            let sd = parents[0].data();
            let ds = parents[0].needs_grad.then(|| {
                (0..k)
                    .map(|i| {
                        let xd = parents[1 + i].data();
                        let mut acc = T::ZERO;
                        for (gi, xi) in g.iter().zip(xd.iter()) {
                            acc += *gi * *xi;
                        }
                        acc
                    })
                    .collect()
            });
            let mut out = vec![ds];
            for i in 0..k {
                let s = sd[i];
                out.push(
                    parents[1 + i]
                        .needs_grad
                        .then(|| g.iter().map(|&gi| gi * s).collect()),
                );
            }
            out
        }),
    ))
}

/// Dot product with a constant vector, as a scalar: `y = sum_i x_i * c_i`.
pub fn dot_const<T: Element>(x: &Value<T>, c: &[T]) -> Result<Value<T>> {
    if x.shape() != [c.len()] {
        return Err(Error::Shape(format!(
            "dot_const expects x [{}], got {:?}",
            c.len(),
            x.shape()
        )));
    }
    let mut acc = T::ZERO;
    for (&xi, &ci) in x.data().iter().zip(c) {
        acc += xi * ci;
    }
    let c = c.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0]
                .needs_grad
                .then(|| c.iter().map(|&ci| ci * g[0]).collect())]
        }),
    ))
}

/// Sum of scalar tensors plus a constant offset, as a scalar.
pub fn add_scalars<T: Element>(xs: &[Value<T>], offset: T) -> Result<Value<T>> {
    let mut acc = offset;
    for x in xs {
        if x.len() != 1 {
            return Err(Error::Shape(format!(
                "add_scalars expects scalars, got {:?}",
                x.shape()
            )));
        }
        acc += x.item();
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        xs.to_vec(),
        Box::new(|parents, g| {
            parents
                .iter()
                .map(|p| p.needs_grad.then(|| vec![g[0]]))
                .collect()
        }),
    ))
}

// ── quantization-aware ops ───────────────────────────────────────────────

/// Learnable clipped activation: `y = clamp(x, 0, alpha)` with `alpha: [1]`.
///
/// Straight-through gradients: `dy/dx = 1` on `0 < x < alpha`, else 0;
/// `dy/dalpha = 1` where `x >= alpha`, else 0.
pub fn pact<T: Element>(x: &Value<T>, alpha: &Value<T>) -> Result<Value<T>> {
    if alpha.shape() != [1] {
        return Err(Error::Shape(format!(
            "pact alpha must be [1], got {:?}",
            alpha.shape()
        )));
    }
    let a = alpha.item();
    if !(a > T::ZERO) {
        return Err(Error::Invalid(format!("pact alpha must be > 0, got {a}")));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| v.maximum(T::ZERO).minimum(a))
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), alpha.clone()],
        Box::new(move |parents, g| {
            let xd = parents[0].data();
            let dx = parents[0].needs_grad.then(|| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| {
                        if xi > T::ZERO && xi < a {
                            gi
                        } else {
                            T::ZERO
                        }
                    })
                    .collect()
            });
            let da = parents[1].needs_grad.then(|| {
                let mut acc = T::ZERO;
                for (&gi, &xi) in g.iter().zip(xd.iter()) {
                    if xi >= a {
                        acc += gi;
                    }
                }
                vec![acc]
            });
            vec![dx, da]
        }),
    ))
}

/// Fake int8 quantization with fixed affine params and a straight-through
/// gradient: pass where the rounded value lands inside `[-128, 127]`, zero
/// where it clips.
pub fn fake_quant<T: Element>(x: &Value<T>, scale: f64, zero_point: i32) -> Result<Value<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Quant(format!(
            "fake_quant scale must be positive and finite, got {scale}"
        )));
    }
    let quantize = move |v: T| -> (T, bool) {
        let q = (v.to_f64() / scale).round_ties_even() + zero_point as f64;
        let clipped = !(-128.0..=127.0).contains(&q);
        let qc = q.clamp(-128.0, 127.0);
        (T::from_f64((qc - zero_point as f64) * scale), !clipped)
    };
    let data = x.data().iter().map(|&v| quantize(v).0).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |parents, g| {
            vec![parents[0].needs_grad.then(|| {
                let xd = parents[0].data();
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if quantize(xi).1 { gi } else { T::ZERO })
                    .collect()
            })]
        }),
    ))
}

/// Weight fake-quantization: min-max affine params recomputed from the
/// current data each forward pass, straight-through gradient.
pub fn fake_quant_minmax<T: Element>(x: &Value<T>) -> Result<Value<T>> {
    let q = crate::quant::minmax_affine_params_iter(x.data().iter().map(|v| v.to_f64()))?;
    fake_quant(x, q.scale, q.zero_point)
}

/// Round each element to the nearest multiple of `scale` with an
/// unconditional straight-through gradient. Unlike `fake_quant` there is no
/// clipping; the caller guarantees the input already lies in range.
pub fn quant_snap<T: Element>(x: &Value<T>, scale: f64) -> Result<Value<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Quant(format!(
            "quant_snap scale must be positive and finite, got {scale}"
        )));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| T::from_f64((v.to_f64() / scale).round_ties_even() * scale))
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|parents, g| vec![parents[0].needs_grad.then(|| g.to_vec())]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t3(n: usize, c: usize, l: usize, data: Vec<f32>, rg: bool) -> Value<f32> {
        Tensor::leaf(&[n, c, l], data, rg).unwrap()
    }

    // Plain translation of the conv definition against an explicitly padded
    // buffer; deliberately shares no index arithmetic with the production
    // kernel.
    fn conv_naive(
        x: &[f32],
        w: &[f32],
        b: &[f32],
        n: usize,
        c_in: usize,
        l_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f32> {
        let lp = l_in + 2 * padding;
        let l_out = (lp - k) / stride + 1;
        let mut padded = vec![0.0f32; n * c_in * lp];
        for nn in 0..n {
            for ci in 0..c_in {
                for li in 0..l_in {
                    padded[(nn * c_in + ci) * lp + padding + li] = x[(nn * c_in + ci) * l_in + li];
                }
            }
        }
        let mut y = vec![0.0f32; n * c_out * l_out];
        for nn in 0..n {
            for co in 0..c_out {
                for lo in 0..l_out {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for kk in 0..k {
                            acc += padded[(nn * c_in + ci) * lp + lo * stride + kk]
                                * w[(co * c_in + ci) * k + kk];
                        }
                    }
                    y[(nn * c_out + co) * l_out + lo] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_edge_detector_with_padding() {
        let x = t3(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0], false);
        let w = t3(1, 1, 3, vec![1.0, 0.0, -1.0], false);
        let y = conv1d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(*y.data(), vec![-2.0, -2.0, -2.0, 3.0]);
    }

    #[test]
    fn conv_sum_kernel_with_bias() {
        let x = t3(1, 1, 3, vec![1.0, 2.0, 3.0], false);
        let w = t3(1, 1, 3, vec![1.0, 1.0, 1.0], false);
        let b = Tensor::constant(&[1], vec![1.0]).unwrap();
        let y = conv1d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 7.0);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32) * 0.3 - 2.0).collect();
        let x = t3(2, 3, 4, data.clone(), false);
        // K = 1 identity mixing matrix across channels.
        let mut w = vec![0.0f32; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = t3(3, 3, 1, w, false);
        let y = conv1d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(*y.data(), data);
    }

    #[test]
    fn conv_matches_naive_padded_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let n = rng.random_range(1..3);
            let c_in = rng.random_range(1..4);
            let c_out = rng.random_range(1..4);
            let l_in = rng.random_range(4..12);
            let k = rng.random_range(1..=l_in.min(5));
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..3);
            let xd: Vec<f32> = (0..n * c_in * l_in)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let wd: Vec<f32> = (0..c_out * c_in * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let bd: Vec<f32> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect = conv_naive(&xd, &wd, &bd, n, c_in, l_in, c_out, k, stride, padding);

            let x = t3(n, c_in, l_in, xd, false);
            let w = t3(c_out, c_in, k, wd, false);
            let b = Tensor::constant(&[c_out], bd).unwrap();
            let y = conv1d(&x, &w, Some(&b), stride, padding).unwrap();
            for (i, (&got, &want)) in y.data().iter().zip(&expect).enumerate() {
                assert!(
                    (got - want).abs() < 1e-6,
                    "case {case} elem {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..5);
            let l = rng.random_range(4..10);
            let k = rng.random_range(1..=l.min(4));
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2);
            let xd: Vec<f32> = (0..n * c * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wd: Vec<f32> = (0..c * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bd: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();

            // Per-channel single-channel convs must agree with the grouped op.
            let y = depthwise_conv1d(
                &t3(n, c, l, xd.clone(), false),
                &t3(c, 1, k, wd.clone(), false),
                Some(&Tensor::constant(&[c], bd.clone()).unwrap()),
                stride,
                padding,
            )
            .unwrap();
            let l_out = conv_out_len(l, k, stride, padding).unwrap();
            for nn in 0..n {
                for cc in 0..c {
                    let xs: Vec<f32> = xd[(nn * c + cc) * l..(nn * c + cc + 1) * l].to_vec();
                    let single = conv_naive(
                        &xs,
                        &wd[cc * k..(cc + 1) * k],
                        &bd[cc..cc + 1],
                        1,
                        1,
                        l,
                        1,
                        k,
                        stride,
                        padding,
                    );
                    for lo in 0..l_out {
                        let got = y.data()[(nn * c + cc) * l_out + lo];
                        assert!((got - single[lo]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_manual_sum_kernel() {
        // y = sum(x) via an all-ones kernel; dy/dx = 1, dy/dw = x, dy/db = 1.
        let x = t3(1, 1, 3, vec![1.0, 2.0, 3.0], true);
        let w = t3(1, 1, 3, vec![1.0, 1.0, 1.0], true);
        let b = Tensor::leaf(&[1], vec![0.5], true).unwrap();
        let y = conv1d(&x, &w, Some(&b), 1, 0).unwrap();
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn linear_forward_and_backward() {
        let x = Tensor::leaf(&[1, 2], vec![1.0f32, 2.0], true).unwrap();
        let w = Tensor::leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], true).unwrap();
        let b = Tensor::leaf(&[2], vec![0.1, -0.1], true).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(*y.data(), vec![1.1, 1.9]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let x = t3(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0], false);
        let gamma = Tensor::constant(&[1], vec![1.0]).unwrap();
        let beta = Tensor::constant(&[1], vec![0.0]).unwrap();
        let (y, mu, var) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert!((mu[0] - 2.5).abs() < 1e-6);
        assert!((var[0] - 1.25).abs() < 1e-6);
        let yd = y.data();
        let mean_y: f32 = yd.iter().sum::<f32>() / 4.0;
        assert!(mean_y.abs() < 1e-6);
        assert!(yd[3] > yd[0]);
    }

    #[test]
    fn batchnorm_eval_is_fixed_affine() {
        let x = t3(1, 1, 2, vec![3.0, 5.0], false);
        let gamma = Tensor::constant(&[1], vec![2.0]).unwrap();
        let beta = Tensor::constant(&[1], vec![1.0]).unwrap();
        let y = batchnorm_eval(&x, &gamma, &beta, &[1.0], &[4.0 - 1e-5], 1e-5).unwrap();
        // (x - 1) / 2 * 2 + 1 = x
        assert!((y.data()[0] - 3.0).abs() < 1e-5);
        assert!((y.data()[1] - 5.0).abs() < 1e-5);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = t3(1, 1, 4, vec![1.0, 5.0, 2.0, 3.0], true);
        let y = maxpool1d(&x, 2, 2).unwrap();
        assert_eq!(*y.data(), vec![5.0, 3.0]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn avgpool_and_gap_average() {
        let x = t3(1, 2, 4, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 6.0, 2.0], false);
        let y = avgpool1d(&x, 2, 2).unwrap();
        assert_eq!(*y.data(), vec![1.5, 3.5, 0.0, 4.0]);
        let z = global_avg_pool(&x).unwrap();
        assert_eq!(z.shape(), &[1, 2]);
        assert_eq!(*z.data(), vec![2.5, 2.0]);
    }

    #[test]
    fn upsample_repeats_and_backward_sums() {
        let x = t3(1, 1, 2, vec![1.0, 2.0], true);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(*y.data(), vec![1.0, 1.0, 2.0, 2.0]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let a = t3(1, 1, 2, vec![1.0, 2.0], true);
        let b = t3(1, 2, 2, vec![3.0, 4.0, 5.0, 6.0], true);
        let y = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_value_and_gradient() {
        let p = Tensor::leaf(&[2], vec![1.0f32, 3.0], true).unwrap();
        let t = Tensor::constant(&[2], vec![0.0, 1.0]).unwrap();
        let l = mse(&p, &t).unwrap();
        assert!((l.item() - 2.5).abs() < 1e-6);
        backward(&l).unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let x = Tensor::constant(&[3], vec![0.0f32, 0.0, 0.0]).unwrap();
        let y = softmax(&x).unwrap();
        for &v in y.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        // Saturated logits underflow to an exact one-hot in f32.
        let x = Tensor::constant(&[3], vec![200.0f32, 0.0, 0.0]).unwrap();
        let y = softmax(&x).unwrap();
        assert_eq!(*y.data(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_sum_grads_match_definition() {
        let s = Tensor::leaf(&[2], vec![0.25f32, 0.75], true).unwrap();
        let a = t3(1, 1, 2, vec![1.0, 2.0], true);
        let b = t3(1, 1, 2, vec![10.0, 20.0], true);
        let y = weighted_sum(&s, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(*y.data(), vec![7.75, 15.5]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(s.grad().unwrap(), vec![3.0, 30.0]);
        assert_eq!(a.grad().unwrap(), vec![0.25, 0.25]);
        assert_eq!(b.grad().unwrap(), vec![0.75, 0.75]);
    }

    #[test]
    fn pact_clamps_and_routes_alpha_grad() {
        let x = Tensor::leaf(&[4], vec![-1.0f32, 0.5, 2.0, 3.0], true).unwrap();
        let alpha = Tensor::leaf(&[1], vec![2.0f32], true).unwrap();
        let y = pact(&x, &alpha).unwrap();
        assert_eq!(*y.data(), vec![0.0, 0.5, 2.0, 2.0]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        // x = 2.0 sits exactly at alpha: alpha takes the gradient, x does not.
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(alpha.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn fake_quant_is_idempotent_and_ste_masks_clip() {
        let x = Tensor::leaf(&[3], vec![0.34f32, 10.0, -0.02], true).unwrap();
        let y = fake_quant(&x, 0.01, 0).unwrap();
        // 10.0 clips at 127 * 0.01.
        assert_eq!(*y.data(), vec![0.34, 1.27, -0.02]);
        let y2 = fake_quant(&y, 0.01, 0).unwrap();
        assert_eq!(*y.data(), *y2.data());
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn trim_tail_crops_and_zero_pads_gradient() {
        let x = t3(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let y = trim_tail(&x, 2).unwrap();
        assert_eq!(*y.data(), vec![1.0, 2.0, 4.0, 5.0]);
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn out_len_matches_formula() {
        assert_eq!(conv_out_len(625, 7, 2, 3).unwrap(), 313);
        assert_eq!(conv_out_len(4, 3, 1, 1).unwrap(), 4);
        assert_eq!(conv_out_len(4, 3, 1, 0).unwrap(), 2);
        assert!(conv_out_len(2, 5, 1, 0).is_err());
    }
}
