//! In-memory scene samples and manifest loading.

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::filtering::{LabelMap, ScoreTensor};
use crate::io::{Manifest, TensorFile};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×3`
    pub image: Tensor,
    /// `H×W×l`
    pub scores: ScoreTensor,
    /// Ground truth, when known.
    pub labels: Option<LabelMap>,
    pub class: usize,
    /// Externally computed backbone outputs. When present they replace the
    /// surrogate backbones wherever node inputs are built.
    pub features: Option<IngestedFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedFeatures {
    /// `F_I`, stride relative to the image.
    pub image: FeatureGrid,
    /// `F_S` before alignment, stride relative to the image.
    pub spatial: FeatureGrid,
}

impl IngestedFeatures {
    /// Wraps two `h×w×c` tensors; strides are inferred from the image size.
    pub fn from_tensors(image_height: usize, image_width: usize, fi: Tensor, fs: Tensor) -> Result<Self> {
        let grid = |t: Tensor, what: &str| -> Result<FeatureGrid> {
            let (h, w, _) = t.dims3()?;
            if h == 0 || w == 0 || !image_height.is_multiple_of(h) || !image_width.is_multiple_of(w) || image_height / h != image_width / w {
                return Err(Error::Dimension(format!(
                    "{what} grid {h}x{w} is not an integer downsampling of the {image_height}x{image_width} image"
                )));
            }
            FeatureGrid::new(t, image_height / h)
        };
        let image = grid(fi, "F_I")?;
        let spatial = grid(fs, "F_S")?;
        if image.tensor().shape()[2] != spatial.tensor().shape()[2] {
            return Err(Error::Dimension(format!(
                "F_I has {} channels but F_S has {}",
                image.tensor().shape()[2],
                spatial.tensor().shape()[2]
            )));
        }
        Ok(Self { image, spatial })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub objects: usize,
    pub samples: Vec<Sample>,
}

/// `foo.image.spc` → `foo.<kind>.spc`.
pub fn sibling_path(image: &Path, kind: &str) -> Option<PathBuf> {
    let name = image.file_name()?.to_str()?;
    let stem = name.strip_suffix(".image.spc")?;
    Some(image.with_file_name(format!("{stem}.{kind}.spc")))
}

/// `foo.image.spc` → `foo.labels.spc`.
pub fn labels_path(image: &Path) -> Option<PathBuf> {
    sibling_path(image, "labels")
}

impl Dataset {
    pub fn new(classes: usize, objects: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.class >= classes {
                return Err(Error::Data(format!("sample {i}: class {} out of range", s.class)));
            }
            if s.scores.num_classes() != objects {
                return Err(Error::Data(format!(
                    "sample {i}: score tensor has {} object channels, expected {objects}",
                    s.scores.num_classes()
                )));
            }
            let (h, w, c) = s.image.dims3()?;
            if c != 3 || (h, w) != (s.scores.height(), s.scores.width()) {
                return Err(Error::Data(format!(
                    "sample {i}: image {:?} does not match scores {}x{}",
                    s.image.shape(),
                    s.scores.height(),
                    s.scores.width()
                )));
            }
        }
        Ok(Self { classes, objects, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class).collect()
    }

    /// Loads every entry of a manifest. Ground-truth label files
    /// (`*.labels.spc`) and precomputed feature grids (`*.fi.spc` together
    /// with `*.fs.spc`) are picked up when they sit next to the image file.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m = Manifest::read(manifest_path)?;
        let samples = m
            .entries
            .iter()
            .map(|e| {
                let image = TensorFile::read(&e.image)?.to_tensor()?;
                let scores = ScoreTensor::new(TensorFile::read(&e.scores)?.to_tensor()?)?;
                let labels = match labels_path(&e.image).filter(|p| p.exists()) {
                    Some(p) => Some(TensorFile::read(&p)?.to_labels(m.objects)?),
                    None => None,
                };
                let existing = |kind| sibling_path(&e.image, kind).filter(|p| p.exists());
                let features = match (existing("fi"), existing("fs")) {
                    (Some(fi), Some(fs)) => {
                        let (h, w, _) = image.dims3()?;
                        Some(IngestedFeatures::from_tensors(
                            h,
                            w,
                            TensorFile::read(&fi)?.to_tensor()?,
                            TensorFile::read(&fs)?.to_tensor()?,
                        )?)
                    }
                    (None, None) => None,
                    _ => {
                        return Err(Error::Data(format!(
                            "{}: feature grids must come in pairs (.fi.spc and .fs.spc)",
                            e.image.display()
                        )))
                    }
                };
                Ok(Sample { image, scores, labels, class: e.class, features })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(m.classes, m.objects, samples)
    }
}
