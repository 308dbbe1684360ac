#![allow(dead_code)]

use atrous_lab::nn::ConvGeom;
use atrous_lab::tensor::Tensor;

/// Direct cross-correlation with zero padding.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
    let ow = (wd + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (xo * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[n, c, iy as usize, ix as usize]) * w.get(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![b, co, oh, ow], out).unwrap()
}

/// 1×1 convolution as a per-pixel matrix product, `w: [C_out, C_in]`.
pub fn pointwise(x: &Tensor<f64>, w: &[f64], bias: Option<&[f64]>, c_out: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; b * c_out * h * wd];
    for n in 0..b {
        for o in 0..c_out {
            for p in 0..h * wd {
                let mut acc = bias.map_or(0.0, |bb| bb[o]);
                for c in 0..ci {
                    acc += w[o * ci + c] * x.data()[(n * ci + c) * h * wd + p];
                }
                out[(n * c_out + o) * h * wd + p] = acc;
            }
        }
    }
    Tensor::from_vec(vec![b, c_out, h, wd], out).unwrap()
}
