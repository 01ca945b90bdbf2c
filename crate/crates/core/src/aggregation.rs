//! Object-wise feature aggregation.
//!
//! The score tensor is filtered, turned into a label map and
//! nearest-resized down to the feature grid. Every object class then gets
//! the masked average of the feature cells it covers. Rows are stacked in
//! class-id order. Classes that cover no cell get a zero row and are flagged
//! absent, so the sequence length is always `l`.

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::filtering::{acf, argmax_labels, BinaryMask, LabelMap, ScoreTensor};
use crate::tensor::{nearest_resize_labels, Tensor};

/// `l×c` per-object feature rows plus presence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSequence {
    data: Tensor,
    presence: Vec<bool>,
}

impl SemanticSequence {
    pub fn new(data: Tensor, presence: Vec<bool>) -> Result<Self> {
        let (l, _) = data.dims2()?;
        if presence.len() != l {
            return Err(Error::dim(format!(
                "{} presence flags for {l} rows",
                presence.len()
            )));
        }
        Ok(Self { data, presence })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn row(&self, o: usize) -> &[f64] {
        self.data.row(o)
    }
}

/// Mean feature over the cells where `mask` is set; the zero vector for an empty mask.
pub fn masked_average(features: &FeatureGrid, mask: &BinaryMask) -> Result<Tensor> {
    if (mask.height(), mask.width()) != (features.height(), features.width()) {
        return Err(Error::dim(format!(
            "mask {}x{} does not match feature grid {}x{}",
            mask.height(),
            mask.width(),
            features.height(),
            features.width()
        )));
    }
    let c = features.channels();
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for (cell, &m) in features.tensor().data().chunks(c).zip(mask.data()) {
        if m == 1 {
            count += 1;
            for (s, v) in sum.iter_mut().zip(cell) {
                *s += v;
            }
        }
    }
    if count > 0 {
        sum.iter_mut().for_each(|s| *s /= count as f64);
    }
    Ok(Tensor::vector(sum))
}

/// Masked average for every class `0..l` in one pass over the grid.
pub fn aggregate(features: &FeatureGrid, labels: &LabelMap, num_objects: usize) -> Result<SemanticSequence> {
    if (labels.height(), labels.width()) != (features.height(), features.width()) {
        return Err(Error::dim(format!(
            "label map {}x{} does not match feature grid {}x{}",
            labels.height(),
            labels.width(),
            features.height(),
            features.width()
        )));
    }
    let c = features.channels();
    let mut sums = vec![0.0; num_objects * c];
    let mut counts = vec![0usize; num_objects];
    for (cell, &label) in features.tensor().data().chunks(c).zip(labels.data()) {
        let o = label as usize;
        if o >= num_objects {
            return Err(Error::Data(format!(
                "label {o} in map exceeds the {num_objects} object classes"
            )));
        }
        counts[o] += 1;
        for (s, v) in sums[o * c..(o + 1) * c].iter_mut().zip(cell) {
            *s += v;
        }
    }
    for (o, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[o * c..(o + 1) * c].iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    SemanticSequence::new(
        Tensor::new(vec![num_objects, c], sums)?,
        counts.iter().map(|&n| n > 0).collect(),
    )
}

/// Output of [`aggregate_pair`]: both sequences and the single label map
/// they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedPair {
    pub rgb: SemanticSequence,
    pub spatial: SemanticSequence,
    pub labels: LabelMap,
}

/// Filter, label, resize the labels to the feature grid, then aggregate
/// both feature grids with the same label map.
pub fn aggregate_pair(
    image_features: &FeatureGrid,
    spatial_features: &FeatureGrid,
    scores: &ScoreTensor,
    filter_kernel: usize,
) -> Result<AggregatedPair> {
    if (image_features.height(), image_features.width())
        != (spatial_features.height(), spatial_features.width())
    {
        return Err(Error::dim(format!(
            "image features {}x{} and aligned spatial features {}x{} differ",
            image_features.height(),
            image_features.width(),
            spatial_features.height(),
            spatial_features.width()
        )));
    }
    let labels = feature_labels(scores, filter_kernel, image_features.height(), image_features.width())?;
    let l = scores.num_classes();
    Ok(AggregatedPair {
        rgb: aggregate(image_features, &labels, l)?,
        spatial: aggregate(spatial_features, &labels, l)?,
        labels,
    })
}

/// `nearest_resize(argmax(acf(S, k)), h, w)`.
pub fn feature_labels(scores: &ScoreTensor, filter_kernel: usize, height: usize, width: usize) -> Result<LabelMap> {
    let filtered = acf(scores, filter_kernel)?;
    nearest_resize_labels(&argmax_labels(&filtered), height, width)
}
