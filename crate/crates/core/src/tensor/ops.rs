use super::{Parameter, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// `a[m×k] · b[k×n]`, accumulated sequentially over `k` in row-major order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of `matmul(a, b)` with respect to both inputs.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(Error::dim(format!(
            "matmul gradient has shape {:?}, expected [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    // ga = g · bᵀ
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            ga[i * k + p] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
        }
    }
    // gb = aᵀ · g
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * g;
            }
        }
    }
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

/// Softmax over the last axis using max-shifted exponentials.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("tensor has at least one axis");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of [`softmax_lastdim`] given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut gx = grad_out.clone();
    for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
        for (g, &yv) in grow.iter_mut().zip(yrow) {
            *g = yv * (*g - dot);
        }
    }
    gx
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalisation of an `n×c` tensor followed by a per-channel affine map.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Parameter,
    beta: &Parameter,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, c) = x.dims2()?;
    if gamma.value.shape() != [c] || beta.value.shape() != [c] {
        return Err(Error::dim(format!(
            "layer_norm affine shapes {:?}/{:?} do not match width {c}",
            gamma.value.shape(),
            beta.value.shape()
        )));
    }
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    let mut out = Tensor::zeros(&[n, c]);
    let (g, b) = (gamma.value.data(), beta.value.data());
    for r in 0..n {
        let row = normalized.row_mut(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
        let xhat: Vec<f64> = row.to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = g[j] * xhat[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &mut Parameter,
    beta: &mut Parameter,
    grad_out: &Tensor,
) -> Tensor {
    let (n, c) = cache.normalized.dims2().unwrap();
    let mut gx = Tensor::zeros(&[n, c]);
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for r in 0..n {
        let xhat = cache.normalized.row(r);
        let gy = grad_out.row(r);
        let mut gxhat = vec![0.0; c];
        for j in 0..c {
            g_gamma[j] += gy[j] * xhat[j];
            g_beta[j] += gy[j];
            gxhat[j] = gy[j] * gamma.value.data()[j];
        }
        let mean_g = gxhat.iter().sum::<f64>() / c as f64;
        let mean_gx = gxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let is = cache.inv_std[r];
        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
            *o = is * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    gamma.accumulate(&Tensor::vector(g_gamma));
    beta.accumulate(&Tensor::vector(g_beta));
    gx
}

/// Channel-wise max pooling of an `H×W×C` tensor with a `k×k` window and stride `s`.
pub fn max_pool2d(x: &Tensor, k: usize, s: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if k == 0 || s == 0 {
        return Err(Error::dim("pool window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::dim(format!(
            "pool window {k}x{k} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for dy in 0..k {
                for dx in 0..k {
                    let base = ((oy * s + dy) * w + ox * s + dx) * c;
                    for (ov, &xv) in o.iter_mut().zip(&xd[base..base + c]) {
                        if xv > *ov {
                            *ov = xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Per-channel mean over all spatial positions of an `H×W×C` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let mut out = vec![0.0; c];
    for cell in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(Tensor::vector(out))
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &Tensor) -> Tensor {
    let n = (shape[0] * shape[1]) as f64;
    let c = shape[2];
    Tensor::from_fn(shape, |i| grad_out.data()[i % c] / n)
}

/// Per-channel maximum and the flat index where it was found (first occurrence).
pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (_, _, c) = x.dims3()?;
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut at = vec![0usize; c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = i % c;
        if v > best[ch] {
            best[ch] = v;
            at[ch] = i;
        }
    }
    Ok((Tensor::vector(best), at))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Gelu => x.map(gelu),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Backward of [`activation`] given the pre-activation input `x`.
pub fn activation_backward(x: &Tensor, kind: Activation, grad_out: &Tensor) -> Tensor {
    let d: fn(f64) -> f64 = match kind {
        Activation::Relu => |v| if v > 0.0 { 1.0 } else { 0.0 },
        Activation::Gelu => gelu_grad,
        Activation::Sigmoid => |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        },
    };
    x.zip_map(grad_out, |v, g| d(v) * g)
        .expect("activation gradient shape must match input")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and, in training mode, the scaling
/// mask (entries 0 or `1/(1-rate)`) that the backward pass multiplies by.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    Ok((x.zip_map(&mask, |a, m| a * m)?, Some(mask)))
}
