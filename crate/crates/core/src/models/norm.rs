//! Fused normalization and bias kernels with analytic gradients.
//!
//! Expressed with broadcasting tensor ops these layers spend most of their
//! backward pass in strided reductions over leading axes; the fused forms
//! reduce with plain loops instead.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

fn read(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = match l.contiguous_offsets() {
        Some(o) => o,
        None => candle_core::bail!("fused kernel expects contiguous input"),
    };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|x| *x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("fused kernels support f32 and f64 only"),
    })
}

fn write(v: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F64(_) => CpuStorage::F64(v),
        _ => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
    }
}

fn values(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()
}

fn tensor_like(v: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

/// Sums `(N, C)` over `N`.
struct SumRows;

impl CustomOp1 for SumRows {
    fn name(&self) -> &'static str {
        "sum-rows"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = *l.dims().last().unwrap_or(&1);
        let x = read(s, l)?;
        let mut out = vec![0.0; c];
        for row in x.chunks_exact(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok((write(out, s), Shape::from(c)))
    }
}

/// `x + bias` with `bias` broadcast along the last axis.
struct BiasLast;

impl CustomOp2 for BiasLast {
    fn name(&self) -> &'static str {
        "bias-last"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let mut x = read(s1, l1)?;
        let b = read(s2, l2)?;
        for row in x.chunks_exact_mut(b.len().max(1)) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok((write(x, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let c = b.elem_count();
        let db = grad.contiguous()?.reshape(((), c))?.apply_op1_no_bwd(&SumRows)?;
        Ok((Some(grad.clone()), Some(db.reshape(b.shape())?)))
    }
}

/// Adds `bias` of shape `(C,)` to every row of `x` `(..., C)`.
pub fn add_bias_last(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(bias, BiasLast)
}

/// Layer normalization over the last axis with affine parameters.
struct LayerNormOp {
    eps: f64,
}

fn ln_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let mut x = read(s1, l1)?;
        let gamma = read(s2, l2)?;
        let beta = read(s3, l3)?;
        for row in x.chunks_exact_mut(gamma.len()) {
            let (mean, rstd) = ln_stats(row, self.eps);
            for ((v, g), b) in row.iter_mut().zip(&gamma).zip(&beta) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
        Ok((write(x, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xs = values(x)?;
        let gs = values(grad)?;
        let gamma_v = values(gamma)?;
        let c = gamma_v.len();
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        for ((row, grow), dxrow) in xs.chunks_exact(c).zip(gs.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
            let (mean, rstd) = ln_stats(row, self.eps);
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for j in 0..c {
                xhat[j] = (row[j] - mean) * rstd;
                dxhat[j] = grow[j] * gamma_v[j];
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
                sum_d += dxhat[j];
                sum_dx += dxhat[j] * xhat[j];
            }
            let n = c as f64;
            for j in 0..c {
                dxrow[j] = rstd * (dxhat[j] - sum_d / n - xhat[j] * sum_dx / n);
            }
        }
        Ok((
            Some(tensor_like(dx, x)?),
            Some(tensor_like(dgamma, gamma)?),
            Some(tensor_like(dbeta, beta)?),
        ))
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(gamma, beta, LayerNormOp { eps })
}

/// Batch normalization of `(B, C, H, W)` with batch statistics.
struct BatchNormOp {
    eps: f64,
}

/// Per-channel mean and biased variance of a `(B, C, H, W)` buffer.
fn channel_stats(x: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for (ci, mu) in mean.iter_mut().enumerate() {
            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            *mu += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            var[ci] += plane.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    match l.dims() {
        [b, c, h, w] => Ok((*b, *c, h * w)),
        d => candle_core::bail!("batch norm expects (B, C, H, W), got {d:?}"),
    }
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "fused-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims4(l1)?;
        let mut x = read(s1, l1)?;
        let gamma = read(s2, l2)?;
        let beta = read(s3, l3)?;
        let (mean, var) = channel_stats(&x, b, c, hw);
        for bi in 0..b {
            for ci in 0..c {
                let scale = gamma[ci] / (var[ci] + self.eps).sqrt();
                let shift = beta[ci] - mean[ci] * scale;
                for v in &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok((write(x, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (b * hw) as f64;
        let xs = values(x)?;
        let gs = values(grad)?;
        let gamma_v = values(gamma)?;
        let (mean, var) = channel_stats(&xs, b, c, hw);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for (xv, gv) in xs[r.clone()].iter().zip(&gs[r]) {
                    dgamma[ci] += gv * (xv - mean[ci]) * rstd[ci];
                    dbeta[ci] += gv;
                }
            }
        }
        let mut dx = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let k = gamma_v[ci] * rstd[ci] / m;
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for ((d, xv), gv) in dx[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&gs[r]) {
                    let xhat = (xv - mean[ci]) * rstd[ci];
                    *d = k * (m * gv - dbeta[ci] - xhat * dgamma[ci]);
                }
            }
        }
        Ok((
            Some(tensor_like(dx, x)?),
            Some(tensor_like(dgamma, gamma)?),
            Some(tensor_like(dbeta, beta)?),
        ))
    }
}

pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(gamma, beta, BatchNormOp { eps })
}

/// Batch mean and biased variance per channel, without gradient.
pub fn batch_stats(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    Ok(channel_stats(&values(x)?, b, c, h * w))
}
