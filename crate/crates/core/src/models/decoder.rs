//! Skip-connected decoder and the joint depth/uncertainty head.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::models::ops::{resize_bilinear, sigmoid, Conv};
use crate::models::params::ParamBuilder;
use crate::types::{BranchTensors, DepthRange};

/// Upsamples from the coarsest stage, concatenating each finer stage, then
/// refines once more at stride 2.
pub struct Decoder {
    fuse: Vec<Conv>,
    refine: Conv,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, channels: &[usize]) -> Result<Self> {
        let mut fuse = Vec::with_capacity(channels.len() - 1);
        for i in 0..channels.len() - 1 {
            fuse.push(Conv::new(
                &pb.pp(format!("fuse{i}")),
                channels[i + 1] + channels[i],
                channels[i],
                3,
                1,
                true,
            )?);
        }
        Ok(Self {
            fuse,
            refine: Conv::new(&pb.pp("refine"), channels[0], channels[0], 3, 1, true)?,
        })
    }

    pub fn forward(&self, stages: &[Tensor]) -> Result<Tensor> {
        if stages.len() != self.fuse.len() + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} stages, got {}",
                self.fuse.len() + 1,
                stages.len()
            )));
        }
        let mut x = stages[stages.len() - 1].clone();
        for i in (0..self.fuse.len()).rev() {
            let (_, _, h, w) = stages[i].dims4()?;
            let up = resize_bilinear(&x, h, w)?;
            x = self.fuse[i].forward(&Tensor::cat(&[&up, &stages[i]], 1)?)?.relu()?;
        }
        let (_, _, h, w) = x.dims4()?;
        let up = resize_bilinear(&x, 2 * h, 2 * w)?;
        Ok(self.refine.forward(&up)?.relu()?)
    }
}

/// Maps decoder features to bounded depth and uncertainty.
pub struct PredictionHead {
    conv: Conv,
    range: DepthRange,
    uncertainty: bool,
}

impl PredictionHead {
    pub fn new(pb: &ParamBuilder, in_c: usize, range: DepthRange, uncertainty: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(pb, in_c, 2, 1, 1, true)?,
            range,
            uncertainty,
        })
    }

    /// `features` at any resolution; outputs are resized to `(h, w)`.
    pub fn forward(&self, features: &Tensor, h: usize, w: usize) -> Result<BranchTensors> {
        let logits = resize_bilinear(&self.conv.forward(features)?, h, w)?;
        Ok(squash(&logits, self.range, self.uncertainty)?)
    }
}

/// Channel 0 becomes `d_min + (d_max - d_min) * sigmoid(z)`, channel 1
/// becomes `sigmoid(z)` or zeros when the uncertainty head is disabled.
pub fn squash(logits: &Tensor, range: DepthRange, uncertainty: bool) -> Result<BranchTensors> {
    let depth = (sigmoid(&logits.narrow(1, 0, 1)?)? * (range.d_max - range.d_min))? + range.d_min;
    let unc_logit = logits.narrow(1, 1, 1)?;
    let uncertainty = if uncertainty {
        sigmoid(&unc_logit)?
    } else {
        unc_logit.zeros_like()?
    };
    Ok(BranchTensors {
        depth: depth?,
        uncertainty,
    })
}
