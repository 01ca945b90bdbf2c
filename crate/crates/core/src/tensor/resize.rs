//! Spatial resampling with half-pixel-centre alignment.
//!
//! Destination index `d` maps to source coordinate `(d + 0.5)·(in/out) − 0.5`,
//! clamped to `[0, in − 1]`. Equal sizes are exact identities.

use super::Tensor;
use crate::error::{Error, Result};
use crate::filtering::LabelMap;

/// Source coordinate for destination index `dst`, clamped to the valid range.
pub fn source_coordinate(dst: usize, input: usize, output: usize) -> f64 {
    let s = (dst as f64 + 0.5) * (input as f64 / output as f64) - 0.5;
    s.clamp(0.0, (input - 1) as f64)
}

/// Channel-wise bilinear resize of an `H×W×C` tensor.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s = source_coordinate(d, input, out);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let xd = x.data();
    let at = |y: usize, xx: usize, ch: usize| xd[(y * w + xx) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Nearest-neighbour resize of a label map; the source index is `floor(src + 0.5)`.
pub fn nearest_resize_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    let (h, w) = (labels.height(), labels.width());
    let pick = |d: usize, input: usize, out: usize| {
        ((source_coordinate(d, input, out) + 0.5).floor() as usize).min(input - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|d| pick(d, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|d| pick(d, w, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &c in &cols {
            data.push(labels.get(r, c));
        }
    }
    LabelMap::new(out_h, out_w, labels.num_classes(), data)
}
