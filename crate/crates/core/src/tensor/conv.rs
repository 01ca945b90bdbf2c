use super::Tensor;
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 {
        return Err(Error::dim("convolution stride must be positive"));
    }
    if kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-d cross-correlation over an `H×W×Cin` input with zero padding.
///
/// `weight` has shape `k×k×Cin×Cout` and `bias` shape `Cout`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, w, cin) = x.dims3()?;
    let (k, cout) = kernel_dims(weight, cin)?;
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    let oh = conv_output_size(h, k, stride, pad)?;
    let ow = conv_output_size(w, k, stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let Some(iy) = source(oy, ky, stride, pad, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = source(ox, kx, stride, pad, w) else { continue };
                    let xin = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`]. The input gradient is only computed when `need_input` is set.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let (h, w, cin) = x.dims3()?;
    let (k, cout) = kernel_dims(weight, cin)?;
    let (oh, ow, gc) = grad_out.dims3()?;
    if gc != cout || oh != conv_output_size(h, k, stride, pad)? || ow != conv_output_size(w, k, stride, pad)? {
        return Err(Error::dim(format!(
            "conv gradient shape {:?} inconsistent with input {:?} and kernel {:?}",
            grad_out.shape(),
            x.shape(),
            weight.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = if need_input { vec![0.0; xd.len()] } else { Vec::new() };
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let Some(iy) = source(oy, ky, stride, pad, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = source(ox, kx, stride, pad, w) else { continue };
                    let xoff = (iy * w + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let range = wbase + ci * cout..wbase + (ci + 1) * cout;
                        if xv != 0.0 {
                            for (gwv, &gv) in gw[range.clone()].iter_mut().zip(g) {
                                *gwv += xv * gv;
                            }
                        }
                        if need_input {
                            gx[xoff + ci] += wd[range].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: if need_input {
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::vector(gb),
    })
}

fn kernel_dims(weight: &Tensor, cin: usize) -> Result<(usize, usize)> {
    match weight.shape()[..] {
        [k, k2, wc, cout] if k == k2 && wc == cin => Ok((k, cout)),
        _ => Err(Error::dim(format!(
            "conv kernel shape {:?} incompatible with {cin} input channels",
            weight.shape()
        ))),
    }
}

#[inline]
fn source(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + kk).checked_sub(pad)?;
    (i < extent).then_some(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.5 - 3.0);
        let mut wt = Tensor::zeros(&[1, 1, 2, 2]);
        wt.set(&[0, 0, 0, 0], 1.0);
        wt.set(&[0, 0, 1, 1], 1.0);
        let y = conv2d(&x, &wt, &Tensor::zeros(&[2]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bias_only_kernel() {
        let x = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 1, 1]), &Tensor::vector(vec![5.0]), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn ones_kernel_counts_window_overlap() {
        let x = Tensor::full(&[5, 5, 1], 1.0);
        let y = conv2d(&x, &Tensor::full(&[3, 3, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        assert_eq!(y.get(&[2, 2, 0]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 2, 0]), 6.0);
    }

    #[test]
    fn strided_output_size() {
        assert_eq!(conv_output_size(64, 3, 2, 1).unwrap(), 32);
        assert_eq!(conv_output_size(7, 3, 2, 1).unwrap(), 4);
        assert!(conv_output_size(2, 5, 1, 1).is_err());
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::zeros(&[2, 2, 1]);
        let err = conv2d(&x, &Tensor::zeros(&[5, 5, 1, 1]), &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
