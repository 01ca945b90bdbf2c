//! Surrogate convolutional backbones for the image branch and the semantic
//! spatial branch, channel attention, and spatial alignment of the two
//! feature grids.
//!
//! Both backbones are small residual stacks: a strided stem convolution
//! followed by stages of basic residual blocks. The spatial branch inserts a
//! channel attention module after every stage; the image branch has none and
//! ends without any global pooling, so its output keeps a spatial extent.

use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::nn::{Conv2d, Linear};
use crate::recognition::{ClassifierHead, HeadCache};
use crate::tensor::{
    activation, activation_backward, bilinear_resize, global_avg_pool, global_avg_pool_backward,
    global_max_pool, Activation, DropoutMode, Tensor,
};
use rand::Rng;

/// Dense `H′×W′×c` feature map and its downsampling factor relative to the
/// original image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    data: Tensor,
    downsample: usize,
}

impl FeatureGrid {
    pub fn new(data: Tensor, downsample: usize) -> Result<Self> {
        data.dims3()?;
        Ok(Self { data, downsample })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let ch = self.channels();
        let o = (r * self.width() + c) * ch;
        &self.data.data()[o..o + ch]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneStage {
    pub width: usize,
    pub stride: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<BackboneStage>,
    /// Channel-attention reduction ratio; `None` disables channel attention.
    pub cham_reduction: Option<usize>,
}

impl BackboneConfig {
    /// Stem plus three stride-2 stages of widths `(16, 32, channels)`: overall factor 16.
    pub fn desk(in_channels: usize, channels: usize, cham_reduction: Option<usize>) -> Self {
        Self::with_factor(in_channels, channels, 16, cham_reduction).expect("16 is a valid factor")
    }

    /// Stride-2 stem followed by stride-2 single-block stages until the
    /// overall factor is reached. Stage widths double from 16; the last is `channels`.
    pub fn with_factor(in_channels: usize, channels: usize, factor: usize, cham_reduction: Option<usize>) -> Result<Self> {
        if factor < 4 || !factor.is_power_of_two() {
            return Err(Error::config(
                "downsample",
                format!("factor {factor} is not a power of two of at least 4"),
            ));
        }
        let n = factor.trailing_zeros() as usize - 1;
        let stages = (0..n)
            .map(|i| BackboneStage {
                width: if i + 1 == n { channels } else { 16 << i },
                stride: 2,
                blocks: 1,
            })
            .collect();
        Ok(Self {
            in_channels,
            stem_width: 16,
            stem_stride: 2,
            stages,
            cham_reduction,
        })
    }

    pub fn downsample_factor(&self) -> usize {
        self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::config(name, msg));
        if self.in_channels == 0 || self.stem_width == 0 || self.stem_stride == 0 {
            return bad("input channels, stem width and stem stride must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.width == 0 || s.stride == 0 || s.blocks == 0 {
                return bad(format!("stage {i} has a zero width, stride or block count"));
            }
            if let Some(r) = self.cham_reduction {
                if r == 0 || s.width % r != 0 {
                    return bad(format!(
                        "channel attention ratio {r} does not divide stage {i} width {}",
                        s.width
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Channel attention: `F ⊙ σ(MLP(avgpool F) + MLP(maxpool F))` with one
/// bottleneck MLP `c → c/r → c` shared by both pooled descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Cham {
    pub reduce: Linear,
    pub expand: Linear,
}

impl_parameterized!(Cham { reduce, expand });

#[derive(Clone, Debug)]
pub struct ChamCache {
    input: Tensor,
    pooled: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    gate_pre: Tensor,
    scale: Tensor,
    max_index: Vec<usize>,
}

impl Cham {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = channels / reduction;
        Self {
            reduce: Linear::new(channels, hidden, 2.0, rng),
            expand: Linear::new(hidden, channels, 1.0, rng),
        }
    }

    /// Per-channel gate in `(0, 1)`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.1.scale)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ChamCache)> {
        let (_, _, c) = x.dims3()?;
        if c != self.reduce.inputs() {
            return Err(Error::dim(format!(
                "channel attention built for {} channels, got {c}",
                self.reduce.inputs()
            )));
        }
        let avg = global_avg_pool(x)?;
        let (max, max_index) = global_max_pool(x)?;
        let pooled = Tensor::new(vec![2, c], [avg.data(), max.data()].concat())?;
        let hidden_pre = self.reduce.forward(&pooled)?;
        let hidden = activation(&hidden_pre, Activation::Relu);
        let both = self.expand.forward(&hidden)?;
        let gate_pre = Tensor::from_fn(&[c], |j| both.data()[j] + both.data()[c + j]);
        let scale = activation(&gate_pre, Activation::Sigmoid);
        let mut y = x.clone();
        for cell in y.data_mut().chunks_mut(c) {
            for (v, s) in cell.iter_mut().zip(scale.data()) {
                *v *= s;
            }
        }
        Ok((
            y,
            ChamCache {
                input: x.clone(),
                pooled,
                hidden_pre,
                hidden,
                gate_pre,
                scale,
                max_index,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ChamCache, grad_out: &Tensor) -> Result<Tensor> {
        let shape = cache.input.shape().to_vec();
        let c = shape[2];
        let mut gx = grad_out.clone();
        let mut g_scale = vec![0.0; c];
        for ((gcell, xcell), gocell) in gx
            .data_mut()
            .chunks_mut(c)
            .zip(cache.input.data().chunks(c))
            .zip(grad_out.data().chunks(c))
        {
            for j in 0..c {
                g_scale[j] += gocell[j] * xcell[j];
                gcell[j] = gocell[j] * cache.scale.data()[j];
            }
        }
        let g_gate = activation_backward(&cache.gate_pre, Activation::Sigmoid, &Tensor::vector(g_scale));
        let g_both = Tensor::new(vec![2, c], [g_gate.data(), g_gate.data()].concat())?;
        let g_hidden = self.expand.backward(&cache.hidden, &g_both)?;
        let g_hidden_pre = activation_backward(&cache.hidden_pre, Activation::Relu, &g_hidden);
        let g_pooled = self.reduce.backward(&cache.pooled, &g_hidden_pre)?;
        let g_avg = Tensor::vector(g_pooled.row(0).to_vec());
        gx.add_assign(&global_avg_pool_backward(&shape, &g_avg))?;
        for (j, &at) in cache.max_index.iter().enumerate() {
            gx.data_mut()[at] += g_pooled.row(1)[j];
        }
        Ok(gx)
    }
}

/// `relu(conv2(relu(conv1 x)) + skip(x))`; `skip` is a strided 1×1
/// projection when the shape changes and the identity otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl_parameterized!(ResBlock { conv1, conv2, skip });

#[derive(Clone, Debug)]
pub struct ResBlockCache {
    input: Tensor,
    h1_pre: Tensor,
    h1: Tensor,
    out_pre: Tensor,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, stride: usize, rng: &mut R) -> Self {
        let skip = (stride != 1 || inputs != outputs).then(|| Conv2d::new(1, inputs, outputs, stride, 1.0, rng));
        Self {
            conv1: Conv2d::new(3, inputs, outputs, stride, 2.0, rng),
            conv2: Conv2d::new(3, outputs, outputs, 1, 1.0, rng),
            skip,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ResBlockCache)> {
        let h1_pre = self.conv1.forward(x)?;
        let h1 = activation(&h1_pre, Activation::Relu);
        let mut out_pre = self.conv2.forward(&h1)?;
        match &self.skip {
            Some(s) => out_pre.add_assign(&s.forward(x)?)?,
            None => out_pre.add_assign(x)?,
        }
        let out = activation(&out_pre, Activation::Relu);
        Ok((
            out,
            ResBlockCache {
                input: x.clone(),
                h1_pre,
                h1,
                out_pre,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ResBlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_pre = activation_backward(&cache.out_pre, Activation::Relu, grad_out);
        let g_h1 = self.conv2.backward(&cache.h1, &g_pre, true)?.expect("input gradient requested");
        let g_h1_pre = activation_backward(&cache.h1_pre, Activation::Relu, &g_h1);
        let mut gx = self.conv1.backward(&cache.input, &g_h1_pre, true)?.expect("input gradient requested");
        match &mut self.skip {
            Some(s) => gx.add_assign(&s.backward(&cache.input, &g_pre, true)?.expect("input gradient requested"))?,
            None => gx.add_assign(&g_pre)?,
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<ResBlock>,
    pub cham: Option<Cham>,
}

impl_parameterized!(Stage { blocks, cham });

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
}

impl_parameterized!(Backbone { stem, stages });

#[derive(Clone, Debug)]
pub struct BackboneCache {
    input: Tensor,
    stem_pre: Tensor,
    stages: Vec<(Vec<ResBlockCache>, Option<ChamCache>)>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate("backbone")?;
        let stem = Conv2d::new(3, config.in_channels, config.stem_width, config.stem_stride, 2.0, rng);
        let mut width = config.stem_width;
        let mut stages = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            let mut blocks = Vec::with_capacity(s.blocks);
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                blocks.push(ResBlock::new(width, s.width, stride, rng));
                width = s.width;
            }
            let cham = config.cham_reduction.map(|r| Cham::new(s.width, r, rng));
            stages.push(Stage { blocks, cham });
        }
        Ok(Self { config, stem, stages })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(FeatureGrid, BackboneCache)> {
        let (h, w, c) = x.dims3()?;
        if c != self.config.in_channels {
            return Err(Error::config(
                "backbone.in_channels",
                format!("backbone expects {} input channels, got {c}", self.config.in_channels),
            ));
        }
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!(
                "input {h}x{w} is not divisible by the backbone downsample factor {f}"
            )));
        }
        let stem_pre = self.stem.forward(x)?;
        let mut cur = activation(&stem_pre, Activation::Relu);
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut block_caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, bc) = block.forward(&cur)?;
                block_caches.push(bc);
                cur = y;
            }
            let cham_cache = match &stage.cham {
                Some(ch) => {
                    let (y, cc) = ch.forward(&cur)?;
                    cur = y;
                    Some(cc)
                }
                None => None,
            };
            caches.push((block_caches, cham_cache));
        }
        Ok((
            FeatureGrid::new(cur, f)?,
            BackboneCache {
                input: x.clone(),
                stem_pre,
                stages: caches,
            },
        ))
    }

    pub fn features(&self, x: &Tensor) -> Result<FeatureGrid> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients; the input gradient is not needed.
    pub fn backward(&mut self, cache: &BackboneCache, grad_out: &Tensor) -> Result<()> {
        let mut g = grad_out.clone();
        for (stage, (block_caches, cham_cache)) in self.stages.iter_mut().zip(&cache.stages).rev() {
            if let (Some(ch), Some(cc)) = (&mut stage.cham, cham_cache) {
                g = ch.backward(cc, &g)?;
            }
            for (block, bc) in stage.blocks.iter_mut().zip(block_caches).rev() {
                g = block.backward(bc, &g)?;
            }
        }
        let g_stem = activation_backward(&cache.stem_pre, Activation::Relu, &g);
        self.stem.backward(&cache.input, &g_stem, false)?;
        Ok(())
    }
}

/// Image feature extractor: residual stack over the RGB grid, no channel attention.
pub fn ifem_forward(image: &Tensor, backbone: &Backbone) -> Result<FeatureGrid> {
    backbone.features(image)
}

/// Semantic spatial relation branch over the filtered score tensor.
///
/// The returned grid's downsample factor is reported relative to the
/// original image, so it includes the filter's own factor.
pub fn ssrm_forward(filtered: &crate::filtering::ScoreTensor, filter_kernel: usize, backbone: &Backbone) -> Result<FeatureGrid> {
    let grid = backbone.features(filtered.tensor())?;
    let factor = grid.downsample() * filter_kernel;
    FeatureGrid::new(grid.into_tensor(), factor)
}

/// Bilinear resize of the spatial feature grid onto the image feature grid's extent.
pub fn align_spatial(spatial: &FeatureGrid, height: usize, width: usize, downsample: usize) -> Result<FeatureGrid> {
    if spatial.height() == height && spatial.width() == width {
        return FeatureGrid::new(spatial.tensor().clone(), downsample);
    }
    FeatureGrid::new(bilinear_resize(spatial.tensor(), height, width)?, downsample)
}

/// Global average pooling followed by the affine classifier (eval mode).
pub fn baseline_head(features: &FeatureGrid, head: &ClassifierHead) -> Result<Tensor> {
    head.logits(&global_avg_pool(features.tensor())?)
}

/// Backbone + global average pool + classifier, trained as one unit in the
/// first training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledClassifier {
    pub backbone: Backbone,
    pub head: ClassifierHead,
}

impl_parameterized!(PooledClassifier { backbone, head });

pub struct PooledCache {
    backbone: BackboneCache,
    grid_shape: Vec<usize>,
    head: HeadCache,
}

impl PooledClassifier {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<(Tensor, PooledCache)> {
        let (grid, bc) = self.backbone.forward(input)?;
        let pooled = global_avg_pool(grid.tensor())?;
        let (logits, hc) = self.head.forward(&pooled, mode, rng)?;
        Ok((
            logits,
            PooledCache {
                backbone: bc,
                grid_shape: grid.tensor().shape().to_vec(),
                head: hc,
            },
        ))
    }

    pub fn backward(&mut self, cache: &PooledCache, grad_logits: &Tensor) -> Result<()> {
        let g_pooled = self.head.backward(&cache.head, grad_logits)?;
        let g_grid = global_avg_pool_backward(&cache.grid_shape, &g_pooled);
        self.backbone.backward(&cache.backbone, &g_grid)
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        baseline_head(&self.backbone.features(input)?, &self.head)
    }
}
