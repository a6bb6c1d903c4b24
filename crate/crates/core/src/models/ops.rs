//! Differentiable building blocks on top of candle primitives.
//!
//! Convolution is lowered to an im2col gather plus one matrix product. The
//! gather's backward is a scatter-add, so the whole layer differentiates
//! through ordinary matmul gradients.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};
use crate::models::norm::{add_bias_last, batch_norm_train, batch_stats, layer_norm};
use crate::models::params::{Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Range of output columns `ox` whose input column `ox * stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        // ix < width  <=>  ox * stride < limit
        let limit = (self.width + self.pad).saturating_sub(kx);
        let hi = limit.div_ceil(self.stride).min(self.out_w);
        (lo.min(hi), hi)
    }

    /// Visits every kernel tap and output row with the matching input row:
    /// `f(input_row_start, column_row_start, kx)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, hw) = (self.kernel, self.out_h * self.out_w);
        let cols = self.cols();
        for ci in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + ci) * self.height * self.width;
                        let col_base = row * cols + b * hw;
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            f(plane + iy as usize * self.width, col_base + oy * self.out_w, kx);
                        }
                    }
                }
            }
        }
    }
}

fn unfold<T: WithDType>(x: &[T], g: Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    g.for_each_row(|in_row, out_row, kx| {
        let (lo, hi) = g.valid_cols(kx);
        if lo >= hi {
            return;
        }
        let start = in_row + lo * g.stride + kx - g.pad;
        let dst = &mut out[out_row + lo..out_row + hi];
        if g.stride == 1 {
            dst.copy_from_slice(&x[start..start + (hi - lo)]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = x[start + j * g.stride];
            }
        }
    });
    out
}

fn fold<T: WithDType>(col: &[T], g: Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    g.for_each_row(|in_row, out_row, kx| {
        let (lo, hi) = g.valid_cols(kx);
        if lo >= hi {
            return;
        }
        let start = in_row + lo * g.stride + kx - g.pad;
        let src = &col[out_row + lo..out_row + hi];
        if g.stride == 1 {
            for (d, s) in out[start..start + (hi - lo)].iter_mut().zip(src) {
                *d += *s;
            }
        } else {
            for (j, s) in src.iter().enumerate() {
                out[start + j * g.stride] += *s;
            }
        }
    });
    out
}

fn contiguous_slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let storage = match s {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous_slice(v, l)?, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((storage, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let storage = match s {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous_slice(v, l)?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((storage, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

/// 2-D convolution of `x` `(B, C, H, W)` with `weight` `(O, C, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kernel, kw) = weight.dims4()?;
    if in_c != channels || kw != kernel {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    if height + 2 * pad < kernel || width + 2 * pad < kernel {
        return Err(Error::Shape(format!(
            "{height}x{width} input too small for kernel {kernel}"
        )));
    }
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h: (height + 2 * pad - kernel) / stride + 1,
        out_w: (width + 2 * pad - kernel) / stride + 1,
    };
    let col = x.contiguous()?.apply_op1(Im2Col(g))?;
    let mut out = weight.reshape((out_c, g.rows()))?.matmul(&col)?;
    if let Some(b) = bias {
        out = out.broadcast_add(&b.reshape((out_c, 1))?)?;
    }
    Ok(out
        .reshape((out_c, batch, g.out_h, g.out_w))?
        .permute((1, 0, 2, 3))?
        .contiguous()?)
}

/// Row-interpolation matrix `(out, in)` for bilinear resampling with
/// half-pixel centers.
fn interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rw = Tensor::from_vec(interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dtype)?;
    let rh = Tensor::from_vec(interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    // width pass: (B*C*H, W) x (W, out_w)
    let t = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rw.t()?)?;
    // height pass on the transposed planes: (B*C*out_w, H) x (H, out_h)
    let t = t
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&rh.t()?)?;
    Ok(t.reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?)
}

/// Softmax over the last axis built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Convolution layer with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = pb.param("weight", &[out_c, in_c, kernel, kernel], Init::Kaiming { fan_in })?;
        let bias = if with_bias {
            Some(pb.param("bias", &[out_c], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            // patchify convolutions (stride == kernel) tile without padding
            pad: if stride == kernel && kernel > 1 { 0 } else { kernel / 2 },
        })
    }

    /// Same layer with weights and bias initialized to zero.
    pub fn zeros(pb: &ParamBuilder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[out_c, in_c, kernel, kernel], Init::Const(0.0))?,
            bias: Some(pb.param("bias", &[out_c], Init::Const(0.0))?),
            stride: 1,
            pad: kernel / 2,
        })
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Fully connected layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", &[out_f, in_f], Init::Uniform(bound))?,
            bias: pb.param("bias", &[out_f], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_f = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = x.elem_count() / in_f.max(1);
        // flatten to 2-D so no batched (broadcast) matmul is involved
        let y = x.contiguous()?.reshape((rows, in_f))?.matmul(&self.weight.t()?)?;
        let y = add_bias_last(&y, &self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty dims") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[dim], Init::Const(1.0))?,
            beta: pb.param("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x, &self.gamma, &self.beta, self.eps)?)
    }
}

/// Spatial batch normalization over `(B, C, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[channels], Init::Const(1.0))?,
            beta: pb.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: pb.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: pb.buffer("running_var", &[channels], Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        if train {
            let (mean, var) = batch_stats(x)?;
            let n = (x.elem_count() / c) as f64;
            let m = self.momentum;
            let dev = x.device();
            let dtype = self.running_mean.dtype();
            let blend = |running: &candle_core::Var, batch: Vec<f64>| -> Result<()> {
                let batch = Tensor::from_vec(batch, c, dev)?.to_dtype(dtype)?;
                Ok(running.set(&((running.as_tensor() * (1.0 - m))? + (batch * m)?)?)?)
            };
            blend(&self.running_mean, mean)?;
            // running variance tracks the unbiased estimate
            blend(&self.running_var, var.iter().map(|v| v * n / (n - 1.0).max(1.0)).collect())?;
            return Ok(batch_norm_train(x, &self.gamma, &self.beta, self.eps)?);
        }
        let shape = (1, c, 1, 1);
        let scale = (self.gamma.detach() / (self.running_var.as_tensor() + self.eps)?.sqrt()?)?;
        let shift = (self.beta.detach() - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(&pb.pp("conv"), in_c, out_c, kernel, stride, false)?,
            bn: BatchNorm::new(&pb.pp("bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}
