//! Domain value types shared by every module.
//!
//! All maps are stored row-major in channel-first order: an RGB image is
//! `(3, H, W)`, depth, uncertainty and mask maps are `(1, H, W)`. Batched
//! tensors add a leading batch axis, `(N, C, H, W)`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        let range = Self { d_min, d_max };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite()) {
            return Err(Error::Config("depth range must be finite".into()));
        }
        if self.d_min <= 0.0 {
            return Err(Error::Config(format!("d_min must be > 0, got {}", self.d_min)));
        }
        if self.d_max <= self.d_min {
            return Err(Error::Config(format!(
                "d_max ({}) must exceed d_min ({})",
                self.d_max, self.d_min
            )));
        }
        Ok(())
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.d_min && d <= self.d_max
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            d_min: 0.5,
            d_max: 10.0,
        }
    }
}

/// RGB image, `(3, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidValue(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// One row across all three channels, used for row-permutation checks.
    pub fn row(&self, row: usize) -> Vec<f32> {
        (0..3)
            .flat_map(|c| {
                let start = (c * self.height + row) * self.width;
                self.data[start..start + self.width].iter().copied()
            })
            .collect()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?)
    }

    /// Reads a `(3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, data)
    }
}

macro_rules! single_channel_map {
    ($name:ident, $elem:ty) => {
        impl $name {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn get(&self, row: usize, col: usize) -> $elem {
                self.data[row * self.width + col]
            }

            pub fn row(&self, row: usize) -> &[$elem] {
                &self.data[row * self.width..(row + 1) * self.width]
            }

            fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
                if len != height * width {
                    return Err(Error::Shape(format!(
                        "expected {} values for a 1x{height}x{width} map, got {len}",
                        height * width
                    )));
                }
                Ok(())
            }
        }
    };
}

/// Depth in meters, `(1, H, W)`. Ground truth uses exactly `0` for invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

single_channel_map!(DepthMap, f32);

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::check_len(height, width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDepth);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.height, self.width), device)?)
    }

    /// Reads a `(1, H, W)` or `(H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, h, w] | [h, w] => (*h, *w),
            dims => return Err(Error::Shape(format!("expected (1, H, W) depth, got {dims:?}"))),
        };
        Self::new(h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Per-pixel uncertainty, `(1, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

single_channel_map!(UncertaintyMap, f32);

impl UncertaintyMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::check_len(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidValue(format!("uncertainty {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.dims() {
            [1, h, w] | [h, w] => (*h, *w),
            dims => {
                return Err(Error::Shape(format!(
                    "expected (1, H, W) uncertainty, got {dims:?}"
                )))
            }
        };
        Self::new(h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Pixels carrying usable ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

single_channel_map!(ValidMask, bool);

impl ValidMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        Self::check_len(height, width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// `(1, H, W)` tensor of 0/1 values in `dtype`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let ones: Vec<f32> = self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_slice(&ones, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub gt_depth: DepthMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, gt_depth: DepthMap) -> Result<Self> {
        if image.height() != gt_depth.height() || image.width() != gt_depth.width() {
            return Err(Error::Shape(format!(
                "image is {}x{} but depth is {}x{}",
                image.height(),
                image.width(),
                gt_depth.height(),
                gt_depth.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            gt_depth,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Depth and uncertainty predicted by one branch for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub depth: DepthMap,
    pub uncertainty: UncertaintyMap,
}

impl BranchOutput {
    pub fn new(depth: DepthMap, uncertainty: UncertaintyMap) -> Result<Self> {
        if depth.height() != uncertainty.height() || depth.width() != uncertainty.width() {
            return Err(Error::Shape("depth and uncertainty sizes differ".into()));
        }
        Ok(Self { depth, uncertainty })
    }
}

/// Batched branch predictions as tensors, each `(N, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct BranchTensors {
    pub depth: Tensor,
    pub uncertainty: Tensor,
}

impl BranchTensors {
    /// Splits the batch into per-image [`BranchOutput`]s.
    pub fn to_outputs(&self) -> Result<Vec<BranchOutput>> {
        let n = self.depth.dim(0)?;
        (0..n)
            .map(|i| {
                BranchOutput::new(
                    DepthMap::from_tensor(&self.depth.get(i)?)?,
                    UncertaintyMap::from_tensor(&self.uncertainty.get(i)?)?,
                )
            })
            .collect()
    }
}

pub fn clamp_depth(d: &DepthMap, range: DepthRange) -> Result<DepthMap> {
    if d.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDepth);
    }
    let (lo, hi) = (range.d_min as f32, range.d_max as f32);
    let data = d.data().iter().map(|v| v.clamp(lo, hi)).collect();
    DepthMap::new(d.height(), d.width(), data)
}

/// True where ground truth is non-zero and inside the evaluation caps.
pub fn valid_mask_of(gt: &DepthMap, range: DepthRange) -> ValidMask {
    let data = gt
        .data()
        .iter()
        .map(|&v| v > 0.0 && range.contains(v as f64))
        .collect();
    ValidMask {
        height: gt.height(),
        width: gt.width(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn range(lo: f64, hi: f64) -> DepthRange {
        DepthRange::new(lo, hi).unwrap()
    }

    fn map(vals: &[f32]) -> DepthMap {
        DepthMap::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn clamp_examples() {
        let r = range(1.0, 80.0);
        assert_eq!(clamp_depth(&map(&[0.5]), r).unwrap().data(), &[1.0]);
        assert_eq!(clamp_depth(&map(&[10.0]), r).unwrap().data(), &[10.0]);
        assert_eq!(clamp_depth(&map(&[100.0]), r).unwrap().data(), &[80.0]);
    }

    #[test]
    fn non_finite_depth_is_rejected() {
        let err = DepthMap::new(1, 1, vec![f32::NAN]).unwrap_err();
        assert_eq!(err.to_string(), "non-finite depth");
    }

    #[test]
    fn mask_examples() {
        let r = range(1.0, 80.0);
        assert_eq!(valid_mask_of(&map(&[0.0, 5.0]), r).data(), &[false, true]);
        assert_eq!(valid_mask_of(&map(&[100.0]), r).data(), &[false]);
        assert_eq!(valid_mask_of(&map(&[1.0, 80.0]), r).data(), &[true, true]);
    }

    #[test]
    fn depth_range_rejects_bad_bounds() {
        assert!(DepthRange::new(0.0, 1.0).is_err());
        assert!(DepthRange::new(2.0, 1.0).is_err());
        assert!(DepthRange::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(RgbImage::new(8, 8, vec![1.5; 192]).is_err());
        assert!(RgbImage::new(4, 8, vec![0.5; 96]).is_err());
        assert!(RgbImage::new(8, 8, vec![0.5; 192]).is_ok());
    }

    #[test]
    fn sample_requires_matching_sizes() {
        let img = RgbImage::new(8, 8, vec![0.0; 192]).unwrap();
        let depth = DepthMap::new(8, 9, vec![1.0; 72]).unwrap();
        assert!(Sample::new("a", img, depth).is_err());
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(vals in proptest::collection::vec(-50f32..150.0, 1..40)) {
            let r = range(1.0, 80.0);
            let once = clamp_depth(&map(&vals), r).unwrap();
            let twice = clamp_depth(&once, r).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.data().iter().all(|v| (1.0..=80.0).contains(v)));
        }

        #[test]
        fn mask_never_marks_zero(vals in proptest::collection::vec(prop_oneof![Just(0f32), 0f32..100.0], 1..40)) {
            let m = valid_mask_of(&map(&vals), range(0.5, 10.0));
            for (v, ok) in vals.iter().zip(m.data()) {
                if *v == 0.0 {
                    prop_assert!(!ok);
                }
            }
        }
    }
}
