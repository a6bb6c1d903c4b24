//! Hierarchical shifted-window attention encoder.
//!
//! Tokens are kept as `(B, H, W, C)` inside the encoder; stage outputs are
//! returned channel-first for the decoder and the coupling units.

use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::models::ops::{softmax_last, Conv, LayerNorm, Linear};
use crate::models::params::{Init, ParamBuilder};

/// Bias added to attention logits between tokens from different regions of
/// a shifted window.
const MASK_VALUE: f64 = -100.0;

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

fn relative_index(window: usize) -> Vec<u32> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            idx.push((dy as usize * span + dx as usize) as u32);
        }
    }
    idx
}

impl WindowAttention {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let t = window * window;
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            bias_table: pb.param("relative_bias", &[span * span, heads], Init::Normal(0.02))?,
            bias_index: Tensor::from_vec(relative_index(window), t * t, pb.device())?,
            heads,
            window,
        })
    }

    /// `x`: `(N, T, C)` window batches; `mask`: `(nW, T, T)` with `N` a
    /// multiple of `nW`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = (qkv.get(0)? * scale)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let mut attn = q.matmul(&k.t()?.contiguous()?)?;
        let tt = self.window * self.window;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((tt, tt, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((n / nw, nw, self.heads, t, t))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((n, self.heads, t, t))?;
        }
        let attn = softmax_last(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, t, c))?;
        self.proj.forward(&out)
    }
}

fn partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))?)
}

fn unpartition(x: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    Ok(x
        .reshape((b, h / window, w / window, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Additive attention mask for a shifted window layout on an `h x w` grid.
fn shift_mask(h: usize, w: usize, window: usize, shift: usize, device: &Device) -> Result<Tensor> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut ids = vec![0usize; nh * nw * t];
    for y in 0..h {
        for x in 0..w {
            let win = (y / window) * nw + x / window;
            let tok = (y % window) * window + x % window;
            ids[win * t + tok] = region(y, h) * 3 + region(x, w);
        }
    }
    let mut mask = vec![0f32; nh * nw * t * t];
    for win in 0..nh * nw {
        for i in 0..t {
            for j in 0..t {
                if ids[win * t + i] != ids[win * t + j] {
                    mask[(win * t + i) * t + j] = MASK_VALUE as f32;
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, t, t), device)?)
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shifted: bool,
}

impl SwinBlock {
    fn new(
        pb: &ParamBuilder,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: WindowAttention::new(&pb.pp("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            fc1: Linear::new(&pb.pp("fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(&pb.pp("fc2"), dim * mlp_ratio, dim)?,
            window,
            shifted,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let ws = self.window;
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let mut y = self.norm1.forward(x)?;
        if (hp, wp) != (h, w) {
            y = y.pad_with_zeros(1, 0, hp - h)?.pad_with_zeros(2, 0, wp - w)?;
        }
        // a single window has nothing to shift across
        let shift = if self.shifted && (hp > ws || wp > ws) { ws / 2 } else { 0 };
        let mask = if shift > 0 {
            y = y.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
            Some(shift_mask(hp, wp, ws, shift, x.device())?.to_dtype(x.dtype())?)
        } else {
            None
        };
        let windows = partition(&y, ws)?;
        let attended = self.attn.forward(&windows, mask.as_ref())?;
        let mut y = unpartition(&attended, ws, b, hp, wp)?;
        if shift > 0 {
            y = y.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        if (hp, wp) != (h, w) {
            y = y.narrow(1, 0, h)?.narrow(2, 0, w)?.contiguous()?;
        }
        let x = (x + y)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + m)?)
    }
}

/// Concatenates each 2x2 neighborhood and projects `4C -> 2C`.
struct PatchMerging {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerging {
    fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), 4 * dim)?,
            reduce: Linear::new(&pb.pp("reduce"), 4 * dim, 2 * dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = if h % 2 == 1 || w % 2 == 1 {
            x.pad_with_zeros(1, 0, h % 2)?.pad_with_zeros(2, 0, w % 2)?
        } else {
            x.clone()
        };
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let merged = x
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h2, w2, 4 * c))?;
        self.reduce.forward(&self.norm.forward(&merged)?)
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
    out_norm: LayerNorm,
    merge: Option<PatchMerging>,
}

/// Attention encoder producing four stages at strides 4, 8, 16 and 32.
pub struct AttentionEncoder {
    embed: Conv,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
    channels: Vec<usize>,
}

impl AttentionEncoder {
    pub fn new(
        pb: &ParamBuilder,
        base: usize,
        heads: &[usize],
        window: usize,
        blocks: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let channels: Vec<usize> = (0..4).map(|i| base << i).collect();
        let mut stages = Vec::with_capacity(4);
        for (i, &dim) in channels.iter().enumerate() {
            let sp = pb.pp(format!("stage{i}"));
            let blocks = (0..blocks)
                .map(|j| {
                    SwinBlock::new(&sp.pp(format!("block{j}")), dim, heads[i], window, mlp_ratio, j % 2 == 1)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                blocks,
                out_norm: LayerNorm::new(&sp.pp("out_norm"), dim)?,
                merge: if i < 3 {
                    Some(PatchMerging::new(&sp.pp("merge"), dim)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            embed: Conv::new(&pb.pp("patch_embed"), 3, base, 4, 4, true)?,
            embed_norm: LayerNorm::new(&pb.pp("patch_norm"), base)?,
            stages,
            channels,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// `images`: `(B, 3, H, W)` with `H`, `W` multiples of 32.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let e = self.embed.forward(images)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.embed_norm.forward(&e)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            let out = stage.out_norm.forward(&x)?;
            outs.push(out.permute((0, 3, 1, 2))?.contiguous()?);
            if let Some(merge) = &stage.merge {
                x = merge.forward(&x)?;
            }
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_symmetric_in_offsets() {
        let idx = relative_index(2);
        // token 0 to itself: offset (0, 0) -> centre of the 3x3 table
        assert_eq!(idx[0], 4);
        // token 0 (0,0) to token 3 (1,1): offset (-1,-1) -> entry 0
        assert_eq!(idx[3], 0);
        // token 3 to token 0: offset (1,1) -> entry 8
        assert_eq!(idx[12], 8);
    }

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shift_mask(8, 8, 4, 2, &Device::Cpu).unwrap();
        assert_eq!(m.dims(), &[4, 16, 16]);
        let v = m.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // first window lies entirely in region 0: no masking
        assert!(v[..256].iter().all(|x| *x == 0.0));
        // last window mixes four regions
        assert!(v[3 * 256..].iter().any(|x| *x == MASK_VALUE as f32));
    }

    #[test]
    fn partition_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 8.0 * 4.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 8, 4, 3))
            .unwrap();
        let p = partition(&x, 4).unwrap();
        assert_eq!(p.dims(), &[4, 16, 3]);
        let back = unpartition(&p, 4, 2, 8, 4).unwrap();
        let a = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
