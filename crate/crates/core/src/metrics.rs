//! Standard monocular depth metrics, computed in `f64` over masked pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthMap, ValidMask};

/// Threshold base for the δ accuracies.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub silog: f64,
    pub sq_err_rel: f64,
    pub abs_err_rel: f64,
    /// Inverse-depth RMSE in 1/km.
    pub irmse: f64,
    pub pixel_count: usize,
}

/// How per-image reports are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    ImageAveraged,
    PixelWeighted,
}

impl MetricReport {
    /// Metric names in the order used for CSV columns.
    pub const NAMES: [&'static str; 12] = [
        "abs_rel",
        "sq_rel",
        "rmse",
        "rmse_log",
        "log10",
        "delta1",
        "delta2",
        "delta3",
        "silog",
        "sq_err_rel",
        "abs_err_rel",
        "irmse",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.silog,
            self.sq_err_rel,
            self.abs_err_rel,
            self.irmse,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }
}

/// Evaluates `pred` against `gt` on the pixels where `mask` is set.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<MetricReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if mask.height() != gt.height() || mask.width() != gt.width() {
        return Err(Error::Shape("mask size differs from ground truth".into()));
    }
    evaluate_slices(pred.data(), gt.data(), mask.data())
}

/// Slice form of [`evaluate`].
pub fn evaluate_slices(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape("pred, gt and mask lengths differ".into()));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut g_sum, mut g_sq, mut inv_sq) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (i, ((&p, &t), &m)) in pred.iter().zip(gt).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let (p, t) = (p as f64, t as f64);
        for v in [p, t] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveDepth { index: i, value: v });
            }
        }
        n += 1;
        let diff = p - t;
        abs_rel += diff.abs() / t;
        sq_rel += diff * diff / t;
        sq += diff * diff;
        let g = p.ln() - t.ln();
        sq_log += g * g;
        g_sum += g;
        g_sq += g * g;
        log10 += (p.log10() - t.log10()).abs();
        let ratio = (p / t).max(t / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < DELTA_BASE.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
        let inv = 1000.0 / p - 1000.0 / t;
        inv_sq += inv * inv;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    let g_mean = g_sum / nf;
    // clamp tiny negative variances from cancellation
    let g_var = (g_sq / nf - g_mean * g_mean).max(0.0);
    Ok(MetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        silog: 100.0 * g_var.sqrt(),
        sq_err_rel: 100.0 * sq_rel / nf,
        abs_err_rel: 100.0 * abs_rel / nf,
        irmse: (inv_sq / nf).sqrt(),
        pixel_count: n,
    })
}

/// Combines per-image reports.
///
/// Image averaging takes the plain mean of every metric. Pixel weighting
/// weights each image by its pixel count; root-mean metrics (rmse, rmse_log,
/// irmse, silog) are pooled as the root of the weighted mean square.
pub fn aggregate(reports: &[MetricReport], mode: Aggregation) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidValue("cannot aggregate an empty report list".into()));
    }
    let weights: Vec<f64> = match mode {
        Aggregation::ImageAveraged => vec![1.0; reports.len()],
        Aggregation::PixelWeighted => reports.iter().map(|r| r.pixel_count as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoValidPixels);
    }
    let mean = |f: &dyn Fn(&MetricReport) -> f64| -> f64 {
        reports.iter().zip(&weights).map(|(r, w)| w * f(r)).sum::<f64>() / total
    };
    let pooled = |f: &dyn Fn(&MetricReport) -> f64| -> f64 {
        match mode {
            Aggregation::ImageAveraged => mean(f),
            Aggregation::PixelWeighted => mean(&|r| f(r) * f(r)).sqrt(),
        }
    };
    Ok(MetricReport {
        abs_rel: mean(&|r| r.abs_rel),
        sq_rel: mean(&|r| r.sq_rel),
        rmse: pooled(&|r| r.rmse),
        rmse_log: pooled(&|r| r.rmse_log),
        log10: mean(&|r| r.log10),
        delta1: mean(&|r| r.delta1),
        delta2: mean(&|r| r.delta2),
        delta3: mean(&|r| r.delta3),
        silog: pooled(&|r| r.silog),
        sq_err_rel: mean(&|r| r.sq_err_rel),
        abs_err_rel: mean(&|r| r.abs_err_rel),
        irmse: pooled(&|r| r.irmse),
        pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
    })
}
