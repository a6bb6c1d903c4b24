//! Convolutional encoder and the coupling units that feed it attention
//! features.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ops::{resize_bilinear, Conv, ConvBnRelu};
use crate::models::params::ParamBuilder;

/// Initialization of the last 1x1 convolution of a coupling unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingInit {
    #[default]
    Random,
    /// Zero weights: the unit starts as the identity on the CNN feature.
    Zero,
}

/// Fuses a transferred attention feature into a CNN feature:
/// align channels (1x1), add, fuse (3x3), project (1x1), residual add.
pub struct CouplingUnit {
    align: ConvBnRelu,
    fuse: ConvBnRelu,
    project: Conv,
}

impl CouplingUnit {
    pub fn new(pb: &ParamBuilder, c_t: usize, c_cnn: usize, init: CouplingInit) -> Result<Self> {
        let project = match init {
            CouplingInit::Random => Conv::new(&pb.pp("project"), c_cnn, c_cnn, 1, 1, true)?,
            CouplingInit::Zero => Conv::zeros(&pb.pp("project"), c_cnn, c_cnn, 1)?,
        };
        Ok(Self {
            align: ConvBnRelu::new(&pb.pp("align"), c_t, c_cnn, 1, 1)?,
            fuse: ConvBnRelu::new(&pb.pp("fuse"), c_cnn, c_cnn, 3, 1)?,
            project,
        })
    }

    /// `f_t` is detached here, so nothing on this path reaches the attention
    /// branch during backpropagation.
    pub fn forward(&self, f_cnn: &Tensor, f_t: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = f_cnn.dims4()?;
        let f_t = resize_bilinear(&f_t.detach(), h, w)?;
        let aligned = self.align.forward(&f_t, train)?;
        let fused = self.fuse.forward(&(f_cnn + aligned)?, train)?;
        Ok((f_cnn + self.project.forward(&fused)?)?)
    }
}

struct CnnStage {
    down: ConvBnRelu,
    refine: ConvBnRelu,
}

/// Four stride-2 stages after a stride-2 stem: strides 4, 8, 16 and 32.
pub struct ConvEncoder {
    stem: ConvBnRelu,
    stages: Vec<CnnStage>,
    channels: Vec<usize>,
}

impl ConvEncoder {
    pub fn new(pb: &ParamBuilder, base: usize) -> Result<Self> {
        let channels: Vec<usize> = (0..4).map(|i| base << i).collect();
        let mut stages = Vec::with_capacity(4);
        let mut in_c = base;
        for (i, &c) in channels.iter().enumerate() {
            let sp = pb.pp(format!("stage{i}"));
            stages.push(CnnStage {
                down: ConvBnRelu::new(&sp.pp("down"), in_c, c, 3, 2)?,
                refine: ConvBnRelu::new(&sp.pp("refine"), c, c, 3, 1)?,
            });
            in_c = c;
        }
        Ok(Self {
            stem: ConvBnRelu::new(&pb.pp("stem"), 3, base, 3, 2)?,
            stages,
            channels,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Runs the encoder, fusing `transferred[i]` after stage `i` when given.
    pub fn forward(
        &self,
        images: &Tensor,
        transferred: Option<(&[Tensor], &[CouplingUnit])>,
        train: bool,
    ) -> Result<Vec<Tensor>> {
        if let Some((feats, units)) = transferred {
            if feats.len() != self.stages.len() || units.len() != self.stages.len() {
                return Err(Error::Shape(format!(
                    "expected {} transferred stages and coupling units, got {} and {}",
                    self.stages.len(),
                    feats.len(),
                    units.len()
                )));
            }
        }
        let mut x = self.stem.forward(images, train)?;
        let mut outs = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.refine.forward(&stage.down.forward(&x, train)?, train)?;
            if let Some((feats, units)) = transferred {
                x = units[i].forward(&x, &feats[i], train)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }
}
