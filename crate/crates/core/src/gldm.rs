//! Global-local dependency modelling.
//!
//! Each semantic sequence is extended with its grid's globally pooled
//! feature as a final node, offset by a learned positional embedding, and
//! passed through one pre-norm transformer encoder block per branch:
//!
//! ```text
//! X³ = X² + MSA(LN(X²))
//! X⁴ = X³ + MLP(LN(X³))
//! ```
//!
//! The two branch outputs are merged by element-wise maximum and refined by
//! one decoder block of the same shape. The final global node is the scene
//! representation.

use crate::aggregation::SemanticSequence;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::impl_parameterized;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{
    activation, activation_backward, global_avg_pool, matmul, matmul_backward, softmax_backward,
    softmax_lastdim, Activation, LayerNormCache, Parameter, Tensor,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `(l+1)×c` node sequence whose last row is the global node.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedSequence {
    data: Tensor,
}

impl ExtendedSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        let (n, _) = data.dims2()?;
        if n < 1 {
            return Err(Error::dim("extended sequence needs a global node"));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Number of object rows `l` (excluding the global node).
    pub fn objects(&self) -> usize {
        self.data.shape()[0] - 1
    }

    pub fn global_node(&self) -> &[f64] {
        self.data.row(self.objects())
    }
}

/// Appends `global_avg_pool(grid)` after the object rows.
pub fn extend_with_global(seq: &SemanticSequence, grid: &FeatureGrid) -> Result<ExtendedSequence> {
    if seq.channels() != grid.channels() {
        return Err(Error::dim(format!(
            "sequence has {} channels, feature grid {}",
            seq.channels(),
            grid.channels()
        )));
    }
    let pooled = global_avg_pool(grid.tensor())?;
    let l = seq.len();
    let c = seq.channels();
    let data = [seq.tensor().data(), pooled.data()].concat();
    ExtendedSequence::new(Tensor::new(vec![l + 1, c], data)?)
}

pub fn add_positional(seq: &ExtendedSequence, embedding: &Parameter) -> Result<ExtendedSequence> {
    ExtendedSequence::new(seq.tensor().add(&embedding.value)?)
}

/// Last row of the decoder output.
pub fn extract_global_node(seq: &ExtendedSequence) -> Tensor {
    Tensor::vector(seq.global_node().to_vec())
}

/// Element-wise maximum of two equally shaped tensors.
pub fn merge_max(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, f64::max)
}

/// Routes the merged gradient to the strictly larger input, half to each on ties.
pub fn merge_max_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let mut ga = grad_out.clone();
    let mut gb = grad_out.clone();
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if x > y {
            gb.data_mut()[i] = 0.0;
        } else if y > x {
            ga.data_mut()[i] = 0.0;
        } else {
            ga.data_mut()[i] *= 0.5;
            gb.data_mut()[i] *= 0.5;
        }
    }
    (ga, gb)
}

/// Scaled dot-product self-attention with `heads` heads of width `c/heads`.
///
/// The query, key and value projections are bias-free `c×c` matrices; a key
/// bias only shifts each logit row by a constant and never changes the output.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Parameter,
    pub key: Parameter,
    pub value: Parameter,
    pub output: Linear,
}

impl_parameterized!(MultiHeadAttention { query, key, value, output });

#[derive(Clone, Debug)]
pub struct MsaCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attention: Vec<Tensor>,
    heads_out: Tensor,
}

impl MsaCache {
    /// One `n×n` row-stochastic matrix per head.
    pub fn attention(&self) -> &[Tensor] {
        &self.attention
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(
                "model.heads",
                format!("{heads} heads do not divide {channels} channels"),
            ));
        }
        Ok(Self {
            heads,
            query: Parameter::kaiming(&[channels, channels], channels, 1.0, rng),
            key: Parameter::kaiming(&[channels, channels], channels, 1.0, rng),
            value: Parameter::kaiming(&[channels, channels], channels, 1.0, rng),
            output: Linear::new(channels, channels, 1.0, rng),
        })
    }

    fn head_dim(&self) -> usize {
        self.output.inputs() / self.heads
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MsaCache)> {
        let (n, _) = x.dims2()?;
        let q = matmul(x, &self.query.value)?;
        let k = matmul(x, &self.key.value)?;
        let v = matmul(x, &self.value.value)?;
        let c = q.shape()[1];
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads_out = Tensor::zeros(&[n, c]);
        let mut attention = Vec::with_capacity(self.heads);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for h in 0..self.heads {
            let off = h * d;
            let mut logits = Tensor::zeros(&[n, n]);
            let ld = logits.data_mut();
            for i in 0..n {
                let qi = &qd[i * c + off..i * c + off + d];
                for j in 0..n {
                    let kj = &kd[j * c + off..j * c + off + d];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    ld[i * n + j] = dot * scale;
                }
            }
            let a = softmax_lastdim(&logits);
            let ad = a.data();
            let od = heads_out.data_mut();
            for i in 0..n {
                for j in 0..n {
                    let w = ad[i * n + j];
                    let vj = &vd[j * c + off..j * c + off + d];
                    let oi = &mut od[i * c + off..i * c + off + d];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            attention.push(a);
        }
        let y = self.output.forward(&heads_out)?;
        Ok((
            y,
            MsaCache {
                input: x.clone(),
                q,
                k,
                v,
                attention,
                heads_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MsaCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_heads = self.output.backward(&cache.heads_out, grad_out)?;
        let (n, c) = g_heads.dims2()?;
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut gq = Tensor::zeros(&[n, c]);
        let mut gk = Tensor::zeros(&[n, c]);
        let mut gv = Tensor::zeros(&[n, c]);
        let (qd, kd, vd, god) = (cache.q.data(), cache.k.data(), cache.v.data(), g_heads.data());
        for (h, a) in cache.attention.iter().enumerate() {
            let off = h * d;
            let ad = a.data();
            // gA = gO · Vᵀ ; gV = Aᵀ · gO
            let mut ga = Tensor::zeros(&[n, n]);
            {
                let gad = ga.data_mut();
                let gvd = gv.data_mut();
                for i in 0..n {
                    let go = &god[i * c + off..i * c + off + d];
                    for j in 0..n {
                        let vj = &vd[j * c + off..j * c + off + d];
                        gad[i * n + j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = ad[i * n + j];
                        for (t, g) in gvd[j * c + off..j * c + off + d].iter_mut().zip(go) {
                            *t += w * g;
                        }
                    }
                }
            }
            let gs = softmax_backward(a, &ga).scale(scale);
            let gsd = gs.data();
            // gQ = gS · K ; gK = gSᵀ · Q
            let gqd = gq.data_mut();
            let gkd = gk.data_mut();
            for i in 0..n {
                for j in 0..n {
                    let s = gsd[i * n + j];
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * c + off..j * c + off + d];
                    for (t, kv) in gqd[i * c + off..i * c + off + d].iter_mut().zip(kj) {
                        *t += s * kv;
                    }
                    let qi = &qd[i * c + off..i * c + off + d];
                    for (t, qv) in gkd[j * c + off..j * c + off + d].iter_mut().zip(qi) {
                        *t += s * qv;
                    }
                }
            }
        }
        let mut gx = Tensor::zeros(cache.input.shape());
        for (w, g) in [(&mut self.query, &gq), (&mut self.key, &gk), (&mut self.value, &gv)] {
            let (gi, gw) = matmul_backward(&cache.input, &w.value, g)?;
            w.accumulate(&gw);
            gx.add_assign(&gi)?;
        }
        Ok(gx)
    }
}

/// `c → ratio·c → c` with GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_parameterized!(Mlp { fc1, fc2 });

/// Pre-norm transformer block used for both the encoders and the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub msa: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl_parameterized!(AttentionBlock { norm1, msa, norm2, mlp });

#[derive(Clone, Debug)]
pub struct BlockCache {
    norm1: LayerNormCache,
    msa: MsaCache,
    norm2: LayerNormCache,
    mlp_in: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl BlockCache {
    pub fn attention(&self) -> &[Tensor] {
        self.msa.attention()
    }
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(channels),
            msa: MultiHeadAttention::new(channels, heads, rng)?,
            norm2: LayerNorm::new(channels),
            mlp: Mlp {
                fc1: Linear::new(channels, channels * mlp_ratio, 2.0, rng),
                fc2: Linear::new(channels * mlp_ratio, channels, 1.0, rng),
            },
        })
    }

    /// Zeroes the attention output projection and the last MLP layer, which
    /// turns the block into an exact identity.
    pub fn zero_residual_branches(&mut self) {
        for p in [
            &mut self.msa.output.weight,
            &mut self.msa.output.bias,
            &mut self.mlp.fc2.weight,
            &mut self.mlp.fc2.bias,
        ] {
            p.value.fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (n1, norm1) = self.norm1.forward(x)?;
        let (attended, msa) = self.msa.forward(&n1)?;
        let x3 = x.add(&attended)?;
        let (mlp_in, norm2) = self.norm2.forward(&x3)?;
        let hidden_pre = self.mlp.fc1.forward(&mlp_in)?;
        let hidden = activation(&hidden_pre, Activation::Gelu);
        let x4 = x3.add(&self.mlp.fc2.forward(&hidden)?)?;
        Ok((
            x4,
            BlockCache {
                norm1,
                msa,
                norm2,
                mlp_in,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_hidden = self.mlp.fc2.backward(&cache.hidden, grad_out)?;
        let g_hidden_pre = activation_backward(&cache.hidden_pre, Activation::Gelu, &g_hidden);
        let g_mlp_in = self.mlp.fc1.backward(&cache.mlp_in, &g_hidden_pre)?;
        let mut g3 = self.norm2.backward(&cache.norm2, &g_mlp_in);
        g3.add_assign(grad_out)?;
        let g_n1 = self.msa.backward(&cache.msa, &g3)?;
        let mut g2 = self.norm1.backward(&cache.norm1, &g_n1);
        g2.add_assign(&g3)?;
        Ok(g2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GldmConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub objects: usize,
    pub decoder: bool,
}

impl GldmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.objects == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("model", "channels, objects and mlp ratio must be positive"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gldm {
    pub pos_rgb: Parameter,
    pub pos_spatial: Parameter,
    pub encoder_rgb: AttentionBlock,
    pub encoder_spatial: AttentionBlock,
    pub decoder: Option<AttentionBlock>,
}

impl_parameterized!(Gldm { pos_rgb, pos_spatial, encoder_rgb, encoder_spatial, decoder });

#[derive(Clone, Debug)]
pub struct GldmCache {
    pub encoder_rgb: BlockCache,
    pub encoder_spatial: BlockCache,
    pub decoder: Option<BlockCache>,
    rgb_out: Tensor,
    spatial_out: Tensor,
    /// Merged sequence `X_o`.
    pub merged: Tensor,
    /// Final sequence the global node is read from.
    pub output: Tensor,
}

impl Gldm {
    pub const POSITIONAL_STD: f64 = 0.02;

    pub fn new<R: Rng + ?Sized>(config: &GldmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shape = [config.objects + 1, config.channels];
        let normal = Normal::new(0.0, Self::POSITIONAL_STD).expect("valid std");
        let pos = |rng: &mut R| Parameter::new(Tensor::from_fn(&shape, |_| normal.sample(rng)));
        let pos_rgb = pos(rng);
        let pos_spatial = pos(rng);
        let block = |rng: &mut R| AttentionBlock::new(config.channels, config.heads, config.mlp_ratio, rng);
        Ok(Self {
            pos_rgb,
            pos_spatial,
            encoder_rgb: block(rng)?,
            encoder_spatial: block(rng)?,
            decoder: if config.decoder { Some(block(rng)?) } else { None },
        })
    }

    /// Encoder layers per branch and decoder layers.
    pub fn depth(&self) -> (usize, usize) {
        (1, usize::from(self.decoder.is_some()))
    }

    /// Runs both encoders, the merge and the decoder on sequences that were
    /// already extended with their global node.
    pub fn forward_extended(&self, rgb: &ExtendedSequence, spatial: &ExtendedSequence) -> Result<(Tensor, GldmCache)> {
        let x2_rgb = add_positional(rgb, &self.pos_rgb)?;
        let x2_spa = add_positional(spatial, &self.pos_spatial)?;
        let (rgb_out, encoder_rgb) = self.encoder_rgb.forward(x2_rgb.tensor())?;
        let (spatial_out, encoder_spatial) = self.encoder_spatial.forward(x2_spa.tensor())?;
        let merged = merge_max(&spatial_out, &rgb_out)?;
        let (output, decoder) = match &self.decoder {
            Some(d) => {
                let (y, c) = d.forward(&merged)?;
                (y, Some(c))
            }
            None => (merged.clone(), None),
        };
        let out_seq = ExtendedSequence::new(output.clone())?;
        Ok((
            extract_global_node(&out_seq),
            GldmCache {
                encoder_rgb,
                encoder_spatial,
                decoder,
                rgb_out,
                spatial_out,
                merged,
                output,
            },
        ))
    }

    /// Backpropagates a gradient on the global node into all parameters.
    pub fn backward(&mut self, cache: &GldmCache, grad_global: &Tensor) -> Result<()> {
        let (n, c) = cache.output.dims2()?;
        let mut g_out = Tensor::zeros(&[n, c]);
        g_out.row_mut(n - 1).copy_from_slice(grad_global.data());
        let g_merged = match (&mut self.decoder, &cache.decoder) {
            (Some(d), Some(dc)) => d.backward(dc, &g_out)?,
            _ => g_out,
        };
        let (g_spa, g_rgb) = merge_max_backward(&cache.spatial_out, &cache.rgb_out, &g_merged);
        let g_x2_rgb = self.encoder_rgb.backward(&cache.encoder_rgb, &g_rgb)?;
        let g_x2_spa = self.encoder_spatial.backward(&cache.encoder_spatial, &g_spa)?;
        self.pos_rgb.accumulate(&g_x2_rgb);
        self.pos_spatial.accumulate(&g_x2_spa);
        Ok(())
    }
}

/// Full module on raw inputs: extend, embed, encode, merge, decode, extract.
pub fn gldm_forward(
    rgb: &SemanticSequence,
    spatial: &SemanticSequence,
    image_features: &FeatureGrid,
    spatial_features: &FeatureGrid,
    gldm: &Gldm,
) -> Result<(Tensor, GldmCache)> {
    let x1_rgb = extend_with_global(rgb, image_features)?;
    let x1_spa = extend_with_global(spatial, spatial_features)?;
    gldm.forward_extended(&x1_rgb, &x1_spa)
}
