//! Brute-force reference implementations. Each one loops over raw slices
//! straight from the definition and calls nothing from the library except
//! the data types' accessors.
//!
//! Size caps keep the loops cheap; exceeding one panics.

#![allow(dead_code, clippy::needless_range_loop)]

use spaco_core::{FeatureGrid, LabelMap, ScoreTensor, Tensor};

const MAX_SIDE: usize = 256;
const MAX_CHANNELS: usize = 512;

fn cap(what: &str, side: usize, channels: usize) {
    assert!(
        side <= MAX_SIDE && channels <= MAX_CHANNELS,
        "oracle size cap exceeded by {what}: side {side}, channels {channels}"
    );
}

/// Neumaier-compensated sum.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Row-major `n×m · m×p`.
pub fn oracle_matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    cap("matmul", n.max(p), m);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..m {
                s += a[i * m + t] * b[t * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

/// Zero-padded cross-correlation, weights `k×k×cin×cout`, output `oh×ow×cout`.
pub fn oracle_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let s = x.shape();
    let (h, wd, cin) = (s[0], s[1], s[2]);
    let ws = w.shape();
    let (k, cout) = (ws[0], ws[3]);
    cap("conv", h.max(wd), cin.max(cout));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = xd[(iy as usize * wd + ix as usize) * cin + ci];
                            let wv = wdat[((ky * k + kx) * cin + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Per-channel window maxima, window `k`, stride `s`, no padding.
pub fn oracle_max_pool(x: &Tensor, k: usize, s: usize) -> Vec<f64> {
    let sh = x.shape();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    cap("max_pool", h.max(w), c);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        let v = x.data()[((oy * s + dy) * w + ox * s + dx) * c + ch];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Filtered scores `(H/k)×(W/k)×l`: every channel max-pooled over
/// non-overlapping `k×k` windows.
pub fn oracle_acf(scores: &ScoreTensor, k: usize) -> Vec<f64> {
    let (h, w, l) = (scores.height(), scores.width(), scores.num_classes());
    cap("acf", h.max(w), l);
    let mut out = vec![0.0; (h / k) * (w / k) * l];
    for o in 0..l {
        for by in 0..h / k {
            for bx in 0..w / k {
                let mut best = f64::NEG_INFINITY;
                for y in by * k..(by + 1) * k {
                    for x in bx * k..(bx + 1) * k {
                        best = best.max(scores.cell(y, x)[o]);
                    }
                }
                out[(by * (w / k) + bx) * l + o] = best;
            }
        }
    }
    out
}

/// First index of the maximum.
pub fn oracle_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

pub fn oracle_argmax_labels(cells: &[f64], l: usize) -> Vec<u16> {
    cells.chunks(l).map(|c| oracle_argmax(c) as u16).collect()
}

/// Per-object means over the grid cells carrying that label, visiting
/// cells in row-major order. Returns `(rows, counts)`; absent objects get a
/// zero row.
pub fn oracle_aggregate(features: &FeatureGrid, labels: &LabelMap, l: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let t = features.tensor();
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    cap("aggregate", h.max(w), c);
    let mut rows = Vec::with_capacity(l);
    let mut counts = Vec::with_capacity(l);
    for o in 0..l {
        let mut sum = vec![0.0; c];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if labels.get(y, x) as usize == o {
                    n += 1;
                    for ch in 0..c {
                        sum[ch] += t.data()[(y * w + x) * c + ch];
                    }
                }
            }
        }
        if n > 0 {
            for v in &mut sum {
                *v /= n as f64;
            }
        }
        rows.push(sum);
        counts.push(n);
    }
    (rows, counts)
}

/// Half-pixel-centre bilinear blend with edge clamping, evaluated per pixel.
pub fn oracle_bilinear(x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    cap("bilinear", h.max(w).max(oh).max(ow), c);
    let src = |d: usize, n_in: usize, n_out: usize| -> f64 {
        let v = (d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        v.max(0.0).min((n_in - 1) as f64)
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let sy = src(oy, h, oh);
        let y0 = sy.floor() as usize;
        let y1 = if y0 + 1 < h { y0 + 1 } else { h - 1 };
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = src(ox, w, ow);
            let x0 = sx.floor() as usize;
            let x1 = if x0 + 1 < w { x0 + 1 } else { w - 1 };
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, xx: usize| x.data()[(y * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Nearest label: source index `floor(src + 0.5)` with half-pixel centres.
pub fn oracle_nearest_labels(labels: &LabelMap, oh: usize, ow: usize) -> Vec<u16> {
    let (h, w) = (labels.height(), labels.width());
    let pick = |d: usize, n_in: usize, n_out: usize| -> usize {
        let v = (d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let v = v.max(0.0).min((n_in - 1) as f64);
        ((v + 0.5).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(labels.get(pick(y, h, oh), pick(x, w, ow)));
        }
    }
    out
}

/// Softmax with compensated normalisation.
pub fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s = exact_sum(e.iter().copied());
    e.iter().map(|v| v / s).collect()
}

/// `−log softmax(z)[y]` via a compensated log-sum-exp.
pub fn oracle_loss(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = exact_sum(z.iter().map(|v| (v - m).exp()));
    m + s.ln() - z[y]
}

/// One attention head from the definition: `softmax(q kᵀ / √d) v` with
/// `q = x wq`, `k = x wk`, `v = x wv` (all `c×d` projections, no biases).
/// Returns the head output `n×d` and the attention matrix `n×n`.
pub fn oracle_attention(x: &[f64], n: usize, c: usize, wq: &[f64], wk: &[f64], wv: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    cap("attention", n, c);
    let q = oracle_matmul(x, wq, n, c, d);
    let k = oracle_matmul(x, wk, n, c, d);
    let v = oracle_matmul(x, wv, n, c, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = Vec::with_capacity(n * n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() * scale)
            .collect();
        attn.extend(oracle_softmax(&logits));
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            for t in 0..d {
                out[i * d + t] += attn[i * n + j] * v[j * d + t];
            }
        }
    }
    (out, attn)
}

/// Column block `h·d..(h+1)·d` of a row-major `c×c` matrix.
pub fn head_columns(w: &[f64], c: usize, h: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * d);
    for r in 0..c {
        out.extend_from_slice(&w[r * c + h * d..r * c + (h + 1) * d]);
    }
    out
}

/// Row-wise layer norm with affine `(γ, β)`.
pub fn oracle_layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = exact_sum(row.iter().copied()) / c as f64;
        let var = exact_sum(row.iter().map(|v| (v - mean) * (v - mean))) / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gamma[i] + beta[i]);
        }
    }
    out
}

/// GELU, tanh form.
pub fn oracle_gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}
