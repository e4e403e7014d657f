//! Plain (tape-free) forward and backward kernels for spatial ops on
//! `C×H×W` tensors.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvShape {
    /// Square kernel, `pad = k / 2`.
    pub fn infer(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Self> {
        if x.ndim() != 3 || weight.ndim() != 4 || bias.ndim() != 1 {
            return Err(Error::dimension(format!(
                "conv2d expects C×H×W input, O×C×K×K weight and O bias; got {:?}, {:?}, {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc, k, k2) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wc != c_in || k != k2 || bias.shape()[0] != c_out || k % 2 == 0 || stride == 0 {
            return Err(Error::dimension(format!(
                "conv2d shape mismatch: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                x.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let pad = k / 2;
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c_in, h, w, c_out, k, stride, pad, h_out, w_out })
    }

    /// Output index range `[lo, hi)` whose tap `kk` lands inside `[0, n)`.
    fn valid_range(&self, kk: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // i * s + off >= 0  and  i * s + off <= n - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((n as isize - 1 - off).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }
}

/// Unfolds `x` into a `(C·K·K)×(H_out·W_out)` patch matrix (zero padded).
fn im2col(x: &[f64], g: &ConvShape) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * plane];
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (i_lo, i_hi) = g.valid_range(ki, g.h, g.h_out);
            for kj in 0..g.k {
                let (j_lo, j_hi) = g.valid_range(kj, g.w, g.w_out);
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                for i in i_lo..i_hi {
                    let row = &src[(i * g.stride + ki - g.pad) * g.w..];
                    let drow = &mut dst[i * g.w_out..(i + 1) * g.w_out];
                    if g.stride == 1 {
                        drow[j_lo..j_hi].copy_from_slice(&row[j_lo + kj - g.pad..j_hi + kj - g.pad]);
                    } else {
                        for j in j_lo..j_hi {
                            drow[j] = row[j * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvShape) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (i_lo, i_hi) = g.valid_range(ki, g.h, g.h_out);
            for kj in 0..g.k {
                let (j_lo, j_hi) = g.valid_range(kj, g.w, g.w_out);
                let r = (c * g.k + ki) * g.k + kj;
                let src = &cols[r * plane..(r + 1) * plane];
                for i in i_lo..i_hi {
                    let yi = i * g.stride + ki - g.pad;
                    let srow = &src[i * g.w_out..(i + 1) * g.w_out];
                    let row = &mut dst[yi * g.w..(yi + 1) * g.w];
                    for j in j_lo..j_hi {
                        row[j * g.stride + kj - g.pad] += srow[j];
                    }
                }
            }
        }
    }
    x
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvShape::infer(x, weight, bias, stride)?;
    let ckk = g.c_in * g.k * g.k;
    let plane = g.h_out * g.w_out;
    let cols = Tensor::new([ckk, plane], im2col(x.data(), &g))?;
    let w = weight.reshape([g.c_out, ckk])?;
    let mut out = w.matmul(&cols)?.into_data();
    for (o, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data()[o];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new([g.c_out, g.h_out, g.w_out], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvShape::infer(x, weight, bias, stride)?;
    let ckk = g.c_in * g.k * g.k;
    let plane = g.h_out * g.w_out;
    let go = grad_out.reshape([g.c_out, plane])?;
    let gb: Vec<f64> = go.data().chunks(plane).map(|c| c.iter().sum()).collect();
    let cols_t = Tensor::new([ckk, plane], im2col(x.data(), &g))?.transpose()?;
    let gw = go.matmul(&cols_t)?;
    let gcols = weight.reshape([g.c_out, ckk])?.transpose()?.matmul(&go)?;
    let gx = col2im(gcols.data(), &g);
    Ok((Tensor::new(x.shape().to_vec(), gx)?, gw.reshape(weight.shape().to_vec())?, Tensor::new([g.c_out], gb)?))
}

fn expect_chw(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::dimension(format!("{what} expects C×H×W, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// 2×2 average pooling with stride 2; a trailing odd row/column is dropped.
pub fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw(x, "avg_pool2")?;
    if h < 2 || w < 2 {
        return Err(Error::dimension(format!("avg_pool2 needs H, W >= 2, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let p = base + 2 * i * w + 2 * j;
                out.push(0.25 * (xd[p] + xd[p + 1] + xd[p + w] + xd[p + w + 1]));
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    let go = grad_out.data();
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * go[(ch * ho + i) * wo + j];
                let p = ch * h * w + 2 * i * w + 2 * j;
                gx[p] += g;
                gx[p + 1] += g;
                gx[p + w] += g;
                gx[p + w + 1] += g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("shape preserved")
}

/// Mean over spatial positions: `C×H×W → C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw(x, "global_avg_pool")?;
    let n = h * w;
    let data = x.data().chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect();
    Tensor::new([c], data)
}
