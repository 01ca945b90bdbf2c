//! Confidence filtering of segmentation scores and label-map extraction.
//!
//! The confidence filter is a non-overlapping per-channel max pool over the
//! score tensor. The label map is the per-cell argmax of the filtered scores,
//! with ties resolved to the lowest class id. No softmax is applied first:
//! argmax is unchanged by any strictly increasing per-cell transform.

use crate::error::{Error, Result};
use crate::tensor::{max_pool2d, Tensor};

/// Per-pixel semantic confidences, shape `H×W×l`. Values are raw network
/// scores and need not sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    data: Tensor,
}

impl ScoreTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims3()?;
        if !data.is_finite() {
            return Err(Error::Data("score tensor contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let l = self.num_classes();
        let o = (r * self.width() + c) * l;
        &self.data.data()[o..o + l]
    }
}

/// Integer grid of semantic class ids in `[0, l)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::dim("label map dimensions and class count must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.data[r * self.width + c]
    }

    /// Number of cells carrying each class id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// `{0,1}` indicator of one object class over a label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    object: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn object(&self) -> usize {
        self.object
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Adaptive confidence filter: per-channel `k×k` max pooling with stride `k`.
///
/// Height and width must be divisible by `k`; the caller crops otherwise.
pub fn acf(scores: &ScoreTensor, k: usize) -> Result<ScoreTensor> {
    if k == 0 {
        return Err(Error::config("acf.kernel", "window size must be positive"));
    }
    let (h, w) = (scores.height(), scores.width());
    if h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!(
            "score tensor {h}x{w} is not divisible by the {k}x{k} filter; crop it to {}x{} first",
            h / k * k,
            w / k * k
        )));
    }
    ScoreTensor::new(max_pool2d(scores.tensor(), k, k)?)
}

/// Per-cell argmax over channels, lowest index on ties.
pub fn argmax_labels(scores: &ScoreTensor) -> LabelMap {
    let l = scores.num_classes();
    let data = scores
        .tensor()
        .data()
        .chunks(l)
        .map(|cell| {
            let mut best = 0;
            for (i, &v) in cell.iter().enumerate() {
                if v > cell[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new(scores.height(), scores.width(), l, data).expect("argmax labels are in range")
}

/// Indicator mask of class `object` in `labels`.
pub fn binary_map(labels: &LabelMap, object: usize) -> Result<BinaryMask> {
    if object >= labels.num_classes() {
        return Err(Error::Argument(format!(
            "object id {object} out of range for {} classes",
            labels.num_classes()
        )));
    }
    Ok(BinaryMask {
        height: labels.height(),
        width: labels.width(),
        object,
        data: labels
            .data()
            .iter()
            .map(|&v| u8::from(v as usize == object))
            .collect(),
    })
}
