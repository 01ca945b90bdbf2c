//! Parameterised layers shared by the backbones and the attention blocks.

use crate::error::Result;
use crate::impl_parameterized;
use crate::tensor::{
    conv2d, conv2d_backward, layer_norm, layer_norm_backward, matmul, matmul_backward,
    LayerNormCache, Parameter, Tensor,
};
use rand::Rng;

/// Affine map `y = x·W + b` applied to each row of an `n×in` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Parameter,
    pub bias: Parameter,
}

impl_parameterized!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Parameter::kaiming(&[inputs, outputs], inputs, gain, rng),
            bias: Parameter::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Parameter::zeros(&[inputs, outputs]),
            bias: Parameter::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for row in y.data_mut().chunks_mut(b.len()) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient for `x`.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (gx, gw) = matmul_backward(x, &self.weight.value, grad_out)?;
        self.weight.accumulate(&gw);
        let n = self.outputs();
        let mut gb = vec![0.0; n];
        for row in grad_out.data().chunks(n) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        self.bias.accumulate(&Tensor::vector(gb));
        Ok(gx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl_parameterized!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[width], 1.0)),
            beta: Parameter::zeros(&[width]),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn backward(&mut self, cache: &LayerNormCache, grad_out: &Tensor) -> Tensor {
        layer_norm_backward(cache, &mut self.gamma, &mut self.beta, grad_out)
    }
}

/// Square-kernel convolution over `H×W×C` grids with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `k × k × in × out`
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub pad: usize,
}

impl_parameterized!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        kernel: usize,
        inputs: usize,
        outputs: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Parameter::kaiming(
                &[kernel, kernel, inputs, outputs],
                kernel * kernel * inputs,
                gain,
                rng,
            ),
            bias: Parameter::zeros(&[outputs]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.pad)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, need_input: bool) -> Result<Option<Tensor>> {
        let g = conv2d_backward(x, &self.weight.value, grad_out, self.stride, self.pad, need_input)?;
        self.weight.accumulate(&g.weight);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}
