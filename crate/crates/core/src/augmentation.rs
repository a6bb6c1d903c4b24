//! Paired image/depth augmentation.
//!
//! Geometric transforms (crop, CutFlip, horizontal flip) always move image
//! and depth together; photometric jitter touches the image only. Every
//! random decision comes from the caller's RNG, and training derives one RNG
//! per sample from `(seed, epoch, sample id)` so results do not depend on
//! worker scheduling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthMap, RgbImage, Sample};

/// Smallest height for which the CutFlip cut range is meaningful.
pub const CUTFLIP_MIN_HEIGHT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub cutflip_prob: f64,
    pub hflip_prob: f64,
    pub color_jitter_strength: f64,
    pub seed: u64,
    /// Training crop; `None` keeps the full frame.
    pub crop_height: Option<usize>,
    pub crop_width: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cutflip_prob: 0.5,
            hflip_prob: 0.5,
            color_jitter_strength: 0.1,
            seed: 0,
            crop_height: None,
            crop_width: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("cutflip_prob", self.cutflip_prob), ("hflip_prob", self.hflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.color_jitter_strength) {
            return Err(Error::Config(format!(
                "color_jitter_strength must lie in [0, 1), got {}",
                self.color_jitter_strength
            )));
        }
        Ok(())
    }
}

/// What the pipeline did to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop_top: usize,
    pub crop_left: usize,
    pub cut: Option<usize>,
    pub flipped: bool,
    pub gains: [f32; 3],
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable per-sample seed. FNV-1a over the id, mixed with seed and epoch.
pub fn derive_seed(seed: u64, epoch: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(epoch))
}

pub fn sample_rng(seed: u64, epoch: u64, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, id))
}

/// Inclusive range `[floor(0.2 h), floor(0.8 h)]` of admissible cut rows,
/// or `None` when `h` is too small.
pub fn cutflip_range(height: usize) -> Option<(usize, usize)> {
    if height < CUTFLIP_MIN_HEIGHT {
        return None;
    }
    Some((height / 5, height * 4 / 5))
}

fn rotate_rows<T: Copy>(data: &[T], rows: usize, cols: usize, planes: usize, cut: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        let plane = &data[p * rows * cols..(p + 1) * rows * cols];
        // rows [cut, h) move to the top, rows [0, cut) to the bottom
        out.extend_from_slice(&plane[cut * cols..]);
        out.extend_from_slice(&plane[..cut * cols]);
    }
    out
}

/// Cuts both maps at row `cut` and swaps the upper and lower parts.
pub fn cutflip_at(image: &RgbImage, depth: &DepthMap, cut: usize) -> Result<(RgbImage, DepthMap)> {
    let (h, w) = (image.height(), image.width());
    if depth.height() != h || depth.width() != w {
        return Err(Error::Shape("cutflip: image and depth sizes differ".into()));
    }
    if cut > h {
        return Err(Error::InvalidValue(format!("cut row {cut} exceeds height {h}")));
    }
    let image = RgbImage::new(h, w, rotate_rows(image.data(), h, w, 3, cut))?;
    let depth = DepthMap::new(h, w, rotate_rows(depth.data(), h, w, 1, cut))?;
    Ok((image, depth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutFlipOutcome {
    pub image: RgbImage,
    pub depth: DepthMap,
    /// The sampled cut row when the transform was applied.
    pub cut: Option<usize>,
}

impl CutFlipOutcome {
    pub fn applied(&self) -> bool {
        self.cut.is_some()
    }
}

/// Applies CutFlip with probability `prob`, sampling one cut row shared by image and depth.
pub fn cutflip<R: Rng + ?Sized>(
    image: &RgbImage,
    depth: &DepthMap,
    prob: f64,
    rng: &mut R,
) -> Result<CutFlipOutcome> {
    let unchanged = || CutFlipOutcome {
        image: image.clone(),
        depth: depth.clone(),
        cut: None,
    };
    let p: f64 = rng.random();
    if p < 1.0 - prob {
        return Ok(unchanged());
    }
    let Some((lo, hi)) = cutflip_range(image.height()) else {
        return Ok(unchanged());
    };
    let cut = rng.random_range(lo..=hi);
    let (image, depth) = cutflip_at(image, depth, cut)?;
    Ok(CutFlipOutcome {
        image,
        depth,
        cut: Some(cut),
    })
}

/// Mirrors both maps along the width axis.
pub fn flip_horizontal(image: &RgbImage, depth: &DepthMap) -> Result<(RgbImage, DepthMap)> {
    let (h, w) = (image.height(), image.width());
    let mirror = |data: &[f32], planes: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks_exact(w).take(planes * h) {
            out.extend(row.iter().rev());
        }
        out
    };
    Ok((
        RgbImage::new(h, w, mirror(image.data(), 3))?,
        DepthMap::new(depth.height(), depth.width(), mirror(depth.data(), 1))?,
    ))
}

/// Flips with probability `prob`; returns whether it flipped.
pub fn horizontal_flip<R: Rng + ?Sized>(
    image: &RgbImage,
    depth: &DepthMap,
    prob: f64,
    rng: &mut R,
) -> Result<(RgbImage, DepthMap, bool)> {
    let p: f64 = rng.random();
    if p < prob {
        let (i, d) = flip_horizontal(image, depth)?;
        Ok((i, d, true))
    } else {
        Ok((image.clone(), depth.clone(), false))
    }
}

/// Multiplies each channel by its gain and clamps to `[0, 1]`.
pub fn apply_gains(image: &RgbImage, gains: [f32; 3]) -> Result<RgbImage> {
    let plane = image.height() * image.width();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v * gains[i / plane]).clamp(0.0, 1.0))
        .collect();
    RgbImage::new(image.height(), image.width(), data)
}

/// Per-channel multiplicative gain drawn from `[1 - strength, 1 + strength]`.
pub fn color_jitter<R: Rng + ?Sized>(
    image: &RgbImage,
    strength: f64,
    rng: &mut R,
) -> Result<(RgbImage, [f32; 3])> {
    if strength == 0.0 {
        return Ok((image.clone(), [1.0; 3]));
    }
    let mut gains = [1.0f32; 3];
    for g in gains.iter_mut() {
        *g = rng.random_range(1.0 - strength..=1.0 + strength) as f32;
    }
    Ok((apply_gains(image, gains)?, gains))
}

/// Crops `sample` to `height x width` at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &Sample,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(Sample, usize, usize)> {
    let (h, w) = (sample.height(), sample.width());
    if height > h || width > w {
        return Err(Error::Shape(format!(
            "crop {height}x{width} larger than image {h}x{w}"
        )));
    }
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    if (height, width) == (h, w) {
        return Ok((sample.clone(), 0, 0));
    }
    let window = |data: &[f32], planes: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            for r in top..top + height {
                let start = (p * h + r) * w + left;
                out.extend_from_slice(&data[start..start + width]);
            }
        }
        out
    };
    let image = RgbImage::new(height, width, window(sample.image.data(), 3))?;
    let depth = DepthMap::new(height, width, window(sample.gt_depth.data(), 1))?;
    Ok((Sample::new(sample.id.clone(), image, depth)?, top, left))
}

/// Crop, then CutFlip, then horizontal flip, then color jitter.
pub fn augment_pipeline<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Sample, AugmentRecord)> {
    let crop_h = cfg.crop_height.unwrap_or(sample.height());
    let crop_w = cfg.crop_width.unwrap_or(sample.width());
    let (cropped, crop_top, crop_left) = random_crop(sample, crop_h, crop_w, rng)?;
    let cf = cutflip(&cropped.image, &cropped.gt_depth, cfg.cutflip_prob, rng)?;
    let (image, depth, flipped) = horizontal_flip(&cf.image, &cf.depth, cfg.hflip_prob, rng)?;
    let (image, gains) = color_jitter(&image, cfg.color_jitter_strength, rng)?;
    Ok((
        Sample::new(sample.id.clone(), image, depth)?,
        AugmentRecord {
            crop_top,
            crop_left,
            cut: cf.cut,
            flipped,
            gains,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Always returns zero bits, so every uniform draw is 0.0.
    struct ZeroRng;

    impl rand::RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0)
        }
    }

    fn labelled(h: usize, w: usize) -> (RgbImage, DepthMap) {
        let img = (0..3 * h * w).map(|i| (i % 251) as f32 / 250.0).collect();
        let depth = (0..h * w).map(|i| 1.0 + (i / w) as f32).collect();
        (
            RgbImage::new(h, w, img).unwrap(),
            DepthMap::new(h, w, depth).unwrap(),
        )
    }

    #[test]
    fn cutflip_four_rows_at_two() {
        let rows = [0.0f32, 1.0, 2.0, 3.0];
        assert_eq!(rotate_rows(&rows, 4, 1, 1, 2), vec![2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn full_height_cut_is_identity() {
        let (img, depth) = labelled(10, 8);
        let (i2, d2) = cutflip_at(&img, &depth, 10).unwrap();
        assert_eq!((i2, d2), (img, depth));
    }

    #[test]
    fn low_draw_leaves_inputs_unchanged() {
        let (img, depth) = labelled(10, 8);
        let mut rng = ZeroRng;
        let out = cutflip(&img, &depth, 0.5, &mut rng).unwrap();
        assert!(!out.applied());
        assert_eq!(out.image, img);
    }

    #[test]
    fn short_images_skip_cutflip() {
        assert_eq!(cutflip_range(4), None);
        assert_eq!(cutflip_range(5), Some((1, 4)));
        assert_eq!(cutflip_range(96), Some((19, 76)));
    }

    #[test]
    fn hflip_examples() {
        let img = RgbImage::new(8, 8, (0..192).map(|i| i as f32 / 191.0).collect()).unwrap();
        let depth = DepthMap::new(8, 8, (0..64).map(|i| i as f32).collect()).unwrap();
        let (i1, d1) = flip_horizontal(&img, &depth).unwrap();
        assert_eq!(d1.row(0)[0], 7.0);
        assert_eq!(d1.row(0)[7], 0.0);
        let (i2, d2) = flip_horizontal(&i1, &d1).unwrap();
        assert_eq!((i2, d2), (img.clone(), depth.clone()));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (i3, d3, flipped) = horizontal_flip(&img, &depth, 0.0, &mut rng).unwrap();
        assert!(!flipped);
        assert_eq!((i3, d3), (img, depth));
    }

    #[test]
    fn jitter_examples() {
        let img = RgbImage::new(8, 8, vec![0.95; 192]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (same, gains) = color_jitter(&img, 0.0, &mut rng).unwrap();
        assert_eq!((same, gains), (img.clone(), [1.0; 3]));
        assert!(apply_gains(&img, [1.1; 3]).unwrap().data().iter().all(|&v| v == 1.0));
        let half = RgbImage::new(8, 8, vec![0.5; 192]).unwrap();
        let dim = apply_gains(&half, [0.9; 3]).unwrap();
        assert!(dim.data().iter().all(|&v| (v - 0.45).abs() < 1e-7));
    }

    #[test]
    fn crop_larger_than_image_errors() {
        let (img, depth) = labelled(10, 8);
        let s = Sample::new("x", img, depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_crop(&s, 12, 8, &mut rng).is_err());
        let cfg = AugmentConfig {
            crop_height: Some(11),
            ..Default::default()
        };
        assert!(augment_pipeline(&s, &cfg, &mut rng).is_err());
    }

    #[test]
    fn zero_probabilities_give_crop_only() {
        let (img, depth) = labelled(12, 10);
        let s = Sample::new("x", img, depth).unwrap();
        let cfg = AugmentConfig {
            cutflip_prob: 0.0,
            hflip_prob: 0.0,
            color_jitter_strength: 0.0,
            crop_height: Some(8),
            crop_width: Some(8),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, rec) = augment_pipeline(&s, &cfg, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cropped, top, left) = random_crop(&s, 8, 8, &mut rng).unwrap();
        assert_eq!(out, cropped);
        assert_eq!((rec.crop_top, rec.crop_left), (top, left));
        assert_eq!(rec.cut, None);
        assert!(!rec.flipped);
    }

    #[test]
    fn pipeline_is_deterministic_per_seed() {
        let (img, depth) = labelled(16, 12);
        let s = Sample::new("scene-3", img, depth).unwrap();
        let cfg = AugmentConfig {
            cutflip_prob: 1.0,
            crop_height: Some(12),
            crop_width: Some(12),
            ..Default::default()
        };
        let a = augment_pipeline(&s, &cfg, &mut sample_rng(9, 2, &s.id)).unwrap();
        let b = augment_pipeline(&s, &cfg, &mut sample_rng(9, 2, &s.id)).unwrap();
        assert_eq!(a, b);
        let c = augment_pipeline(&s, &cfg, &mut sample_rng(9, 3, &s.id)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn derived_seeds_differ_by_id_and_epoch() {
        assert_ne!(derive_seed(1, 0, "a"), derive_seed(1, 0, "b"));
        assert_ne!(derive_seed(1, 0, "a"), derive_seed(1, 1, "a"));
        assert_ne!(derive_seed(1, 0, "a"), derive_seed(2, 0, "a"));
        assert_eq!(derive_seed(1, 0, "a"), derive_seed(1, 0, "a"));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            cutflip_prob: 1.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn cutflip_permutes_rows_identically(h in 5usize..40, w in 8usize..12, seed in any::<u64>()) {
            let h = h.max(8);
            let (img, depth) = labelled(h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = cutflip(&img, &depth, 1.0, &mut rng).unwrap();
            let cut = out.cut.unwrap();
            for r in 0..h {
                let src = (r + cut) % h;
                prop_assert_eq!(out.image.row(r), img.row(src));
                prop_assert_eq!(out.depth.row(r), depth.row(src));
            }
            let (i2, d2) = cutflip_at(&out.image, &out.depth, h - cut).unwrap();
            prop_assert_eq!(i2, img);
            prop_assert_eq!(d2, depth);
        }

        #[test]
        fn jitter_never_touches_depth(seed in any::<u64>()) {
            let (img, depth) = labelled(12, 9);
            let s = Sample::new("p", img, depth.clone()).unwrap();
            let cfg = AugmentConfig { cutflip_prob: 0.0, hflip_prob: 0.0, color_jitter_strength: 0.3, ..Default::default() };
            let (out, _) = augment_pipeline(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.gt_depth, depth);
        }
    }
}
