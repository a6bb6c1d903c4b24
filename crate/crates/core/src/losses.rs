//! Training objectives for the dual-branch model.
//!
//! Every function takes batched `(N, 1, H, W)` tensors and reduces by the
//! mean over pixels (or over valid pixels where the term is defined on the
//! ground-truth set), then by the mean over the batch. Masks are 0/1 tensors
//! of the same dtype as the predictions.
//!
//! Gradient flow is part of each function's contract: pseudo-labels and
//! uncertainty targets enter through [`Tensor::detach`], so autodiff never
//! routes gradient into them.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to the uncertainty-target denominator.
pub const UNCERTAINTY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the cross-distillation term.
    pub lambda1: f64,
    /// Weight of the uncertainty regression term.
    pub lambda2: f64,
    /// Output scale of the scale-invariant loss.
    pub kappa: f64,
    /// Fraction of the squared mean log residual removed by the scale-invariant loss.
    pub eta: f64,
    /// Error tolerance of the uncertainty target.
    pub b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
            kappa: 10.0,
            eta: 0.85,
            b: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.kappa, self.eta, self.b];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.b <= 0.0 {
            return Err(Error::Config(format!("b must be > 0, got {}", self.b)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.kappa <= 0.0 {
            return Err(Error::Config("lambda1, lambda2 must be >= 0 and kappa > 0".into()));
        }
        Ok(())
    }

    /// `ssi + lambda1 * urcd + lambda2 * u`.
    pub fn combine(&self, ssi: f64, urcd: f64, u: f64) -> f64 {
        ssi + self.lambda1 * urcd + self.lambda2 * u
    }
}

/// Scalar values of the loss terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ssi: f64,
    pub urcd: f64,
    pub u: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.ssi.is_finite() && self.urcd.is_finite() && self.u.is_finite() && self.total.is_finite()
    }
}

/// Differentiable loss terms; `total` is the tensor to backpropagate.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ssi: Tensor,
    pub urcd: Tensor,
    pub u: Tensor,
    pub total: Tensor,
    /// The weights actually applied (disabled terms have weight 0).
    pub weights: LossWeights,
}

impl LossTerms {
    pub fn bundle(&self) -> Result<LossBundle> {
        let ssi = scalar(&self.ssi)?;
        let urcd = scalar(&self.urcd)?;
        let u = scalar(&self.u)?;
        Ok(LossBundle {
            ssi,
            urcd,
            u,
            total: self.weights.combine(ssi, urcd, u),
        })
    }
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub cross_distill: bool,
    pub uncertainty_rectify: bool,
    pub urcd_on_valid_only: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            cross_distill: true,
            uncertainty_rectify: true,
            urcd_on_valid_only: false,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-sample sum over all non-batch axes, shape `(N,)`.
fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

/// Per-sample valid-pixel counts; errors if any sample has none.
fn valid_counts(mask: &Tensor) -> Result<Tensor> {
    let counts = per_sample_sum(mask)?;
    let min = counts.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if min < 0.5 {
        return Err(Error::NoValidPixels);
    }
    Ok(counts)
}

fn mask_cond(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.ne(0.0)?)
}

/// Replaces off-mask values by 1 so logarithms and ratios stay finite there.
fn fill_off_mask(t: &Tensor, cond: &Tensor) -> Result<Tensor> {
    Ok(cond.where_cond(t, &t.ones_like()?)?)
}

fn check_positive_on_mask(what: &str, t: &Tensor, cond: &Tensor) -> Result<()> {
    let vals = fill_off_mask(t, cond)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some((index, &value)) = vals.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        log::debug!("{what} fails positivity at flat index {index}");
        return Err(Error::NonPositiveDepth { index, value });
    }
    Ok(())
}

/// `sqrt(v)` for `v > 0`, `0` otherwise, with a finite (zero) gradient at the origin.
fn safe_sqrt(v: &Tensor) -> Result<Tensor> {
    let pos = v.gt(0.0)?;
    let s = pos.where_cond(v, &v.ones_like()?)?.sqrt()?;
    Ok(pos.where_cond(&s, &v.zeros_like()?)?)
}

/// Scale-invariant log loss, `kappa * sqrt(mean(g^2) - eta * mean(g)^2)` with
/// `g = ln(pred) - ln(gt)` over valid pixels, averaged over the batch.
pub fn ssi_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor, kappa: f64, eta: f64) -> Result<Tensor> {
    check_same_shape("ssi pred/gt", pred, gt)?;
    check_same_shape("ssi pred/mask", pred, mask)?;
    let counts = valid_counts(mask)?;
    let cond = mask_cond(mask)?;
    check_positive_on_mask("pred", pred, &cond)?;
    let g = ((fill_off_mask(pred, &cond)?.log()? - fill_off_mask(gt, &cond)?.log()?)? * mask)?;
    let mean_sq = per_sample_sum(&g.sqr()?)?.div(&counts)?;
    let mean = per_sample_sum(&g)?.div(&counts)?;
    let var = (mean_sq - (mean.sqr()? * eta)?)?;
    Ok((safe_sqrt(&var)? * kappa)?.mean(0)?)
}

/// Laplace-style uncertainty target `1 - exp(-|pred - gt| / (b (pred + gt)))`
/// on valid pixels and 0 elsewhere. The result is detached from `pred`.
pub fn uncertainty_target(pred: &Tensor, gt: &Tensor, mask: &Tensor, b: f64) -> Result<Tensor> {
    check_same_shape("uncertainty target pred/gt", pred, gt)?;
    check_same_shape("uncertainty target pred/mask", pred, mask)?;
    let cond = mask_cond(mask)?;
    let pred = fill_off_mask(&pred.detach(), &cond)?;
    let gt = fill_off_mask(gt, &cond)?;
    let sum = (&pred + &gt)?;
    check_positive_on_mask("pred + gt", &sum, &cond)?;
    let ratio = (pred - &gt)?.abs()?.div(&((sum * b)? + UNCERTAINTY_EPS)?)?;
    let target = ratio.neg()?.exp()?.neg()?.affine(1.0, 1.0)?;
    Ok((target * mask)?.detach())
}

fn masked_mean_abs(pred: &Tensor, target: &Tensor, mask: &Tensor, counts: &Tensor) -> Result<Tensor> {
    let diff = ((pred - target.detach())?.abs()? * mask)?;
    Ok(per_sample_sum(&diff)?.div(counts)?)
}

/// L1 regression of both branches' uncertainty onto their targets over valid pixels.
pub fn uncertainty_loss(
    u_t: &Tensor,
    u_c: &Tensor,
    target_t: &Tensor,
    target_c: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    check_same_shape("uncertainty loss u_t/target_t", u_t, target_t)?;
    check_same_shape("uncertainty loss u_c/target_c", u_c, target_c)?;
    check_same_shape("uncertainty loss u_t/u_c", u_t, u_c)?;
    check_same_shape("uncertainty loss u_t/mask", u_t, mask)?;
    let counts = valid_counts(mask)?;
    let t = masked_mean_abs(u_t, target_t, mask, &counts)?;
    let c = masked_mean_abs(u_c, target_c, mask, &counts)?;
    Ok((t + c)?.mean(0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UrcdOptions {
    /// Down-weight each pixel by `1 - u` of the pseudo-label's branch.
    pub rectify: bool,
    /// Average over valid ground-truth pixels only instead of the whole map.
    pub valid_only: bool,
}

impl Default for UrcdOptions {
    fn default() -> Self {
        Self {
            rectify: true,
            valid_only: false,
        }
    }
}

/// The two halves of the cross-distillation loss, already batch-reduced:
/// the transformer learning from the CNN, then the CNN learning from the transformer.
pub fn urcd_terms(
    d_t: &Tensor,
    d_c: &Tensor,
    u_t: &Tensor,
    u_c: &Tensor,
    mask: Option<&Tensor>,
    opts: UrcdOptions,
) -> Result<(Tensor, Tensor)> {
    check_same_shape("urcd d_t/d_c", d_t, d_c)?;
    check_same_shape("urcd d_t/u_t", d_t, u_t)?;
    check_same_shape("urcd d_t/u_c", d_t, u_c)?;
    let half = |student: &Tensor, label: &Tensor, label_u: &Tensor| -> Result<Tensor> {
        let residual = (student - label.detach())?.abs()?;
        let weighted = if opts.rectify {
            (label_u.detach().affine(-1.0, 1.0)? * residual)?
        } else {
            residual
        };
        let per_sample = match (opts.valid_only, mask) {
            (true, Some(mask)) => {
                check_same_shape("urcd d_t/mask", student, mask)?;
                per_sample_sum(&(weighted * mask)?)?.div(&valid_counts(mask)?)?
            }
            (true, None) => {
                return Err(Error::InvalidValue(
                    "valid-only cross-distillation needs a mask".into(),
                ))
            }
            (false, _) => weighted.flatten_from(1)?.mean(1)?,
        };
        Ok(per_sample.mean(0)?)
    };
    Ok((half(d_t, d_c, u_c)?, half(d_c, d_t, u_t)?))
}

/// Uncertainty-rectified cross-distillation loss (sum of both halves).
pub fn urcd_loss(
    d_t: &Tensor,
    d_c: &Tensor,
    u_t: &Tensor,
    u_c: &Tensor,
    mask: Option<&Tensor>,
    opts: UrcdOptions,
) -> Result<Tensor> {
    let (a, b) = urcd_terms(d_t, d_c, u_t, u_c, mask, opts)?;
    Ok((a + b)?)
}

/// The full objective. Disabled terms are not computed and report 0.
///
/// With `cross_distill` off both weights drop to zero and the result is the
/// sum of two independent supervised losses. With `uncertainty_rectify` off
/// the distillation uses unit weights and the uncertainty term is dropped.
pub fn total_loss(
    transformer: &crate::types::BranchTensors,
    cnn: &crate::types::BranchTensors,
    gt: &Tensor,
    mask: &Tensor,
    weights: &LossWeights,
    switches: LossSwitches,
) -> Result<LossTerms> {
    let ssi = (ssi_loss(&transformer.depth, gt, mask, weights.kappa, weights.eta)?
        + ssi_loss(&cnn.depth, gt, mask, weights.kappa, weights.eta)?)?;
    let zero = ssi.zeros_like()?.detach();
    let mut applied = *weights;

    let urcd = if switches.cross_distill {
        urcd_loss(
            &transformer.depth,
            &cnn.depth,
            &transformer.uncertainty,
            &cnn.uncertainty,
            Some(mask),
            UrcdOptions {
                rectify: switches.uncertainty_rectify,
                valid_only: switches.urcd_on_valid_only,
            },
        )?
    } else {
        applied.lambda1 = 0.0;
        zero.clone()
    };

    let u = if switches.cross_distill && switches.uncertainty_rectify {
        let target_t = uncertainty_target(&transformer.depth, gt, mask, weights.b)?;
        let target_c = uncertainty_target(&cnn.depth, gt, mask, weights.b)?;
        uncertainty_loss(
            &transformer.uncertainty,
            &cnn.uncertainty,
            &target_t,
            &target_c,
            mask,
        )?
    } else {
        applied.lambda2 = 0.0;
        zero
    };

    let total = ((&ssi + (&urcd * applied.lambda1)?)? + (&u * applied.lambda2)?)?;
    Ok(LossTerms {
        ssi,
        urcd,
        u,
        total,
        weights: applied,
    })
}
