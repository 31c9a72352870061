//! Training losses and their fixed composition.
//!
//! All mask-facing terms are binary cross-entropy evaluated in logit space,
//! `max(l, 0) - l*t + ln(1 + exp(-|l|))`, which never exponentiates a large
//! positive number. Reduction is always the mean over elements.
//!
//! The composite objective adds the detector terms, the mask term, the
//! auxiliary semantic term scaled by [`SEMANTIC_LOSS_WEIGHT`], and the point
//! term, strictly in that order, so the total is reproducible to the bit.

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{ensure_same_shape, sample_points_bilinear, sigmoid_scalar, Real, Tensor};

/// Weight of the auxiliary semantic term inside [`total_loss`].
pub const SEMANTIC_LOSS_WEIGHT: f64 = 0.3;

pub(crate) fn bce_scalar<T: Real>(logit: T, target: T) -> T {
    logit.max(T::zero()) - logit * target + (T::one() + (-logit.abs()).exp()).ln()
}

fn check_binary_targets<T: Real>(context: &'static str, targets: &Tensor<T>) -> Result<()> {
    for (i, &t) in targets.data().iter().enumerate() {
        if t != T::zero() && t != T::one() {
            return Err(Error::validation(
                context,
                format!("target at flat index {} is {}, expected exactly 0 or 1", i, t),
            ));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of a logit map against a hard 0/1 target map of
/// the same shape.
pub fn bce_mask_loss<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    ensure_same_shape("bce_mask_loss", logits, targets)?;
    check_binary_targets("bce_mask_loss", targets)?;
    let mut acc = T::zero();
    for (&l, &t) in logits.data().iter().zip(targets.data()) {
        acc += bce_scalar(l, t);
    }
    Ok(acc / T::from_usize(logits.numel()))
}

/// Gradient of [`bce_mask_loss`] with respect to the logits:
/// `(sigmoid(l) - t) / numel`, scaled by the upstream factor.
pub fn bce_mask_loss_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>> {
    ensure_same_shape("bce_mask_loss_backward", logits, targets)?;
    check_binary_targets("bce_mask_loss_backward", targets)?;
    let inv_n = upstream / T::from_usize(logits.numel());
    let mut grad = logits.clone();
    for (g, (&l, &t)) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data().iter().zip(targets.data()))
    {
        *g = (sigmoid_scalar(l) - t) * inv_n;
    }
    Ok(grad)
}

/// Nearest-neighbour resample of a mask with half-pixel-center alignment.
pub fn nearest_resize_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0 || width == 0 {
        return Err(Error::shape(
            "nearest_resize_mask",
            format!("target extent must be >= 1, got {}x{}", height, width),
        ));
    }
    let (sw, sh) = (mask.width(), mask.height());
    let pick = |dst: usize, src_extent: usize, dst_extent: usize| -> usize {
        let c = (dst as f64 + 0.5) * (src_extent as f64 / dst_extent as f64) - 0.5;
        (c.round().max(0.0) as usize).min(src_extent - 1)
    };
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = pick(y, sh, height);
        for x in 0..width {
            let sx = pick(x, sw, width);
            data.push(mask.data()[sy * sw + sx]);
        }
    }
    BinaryMask::new(width, height, data)
}

/// Auxiliary whole-scene foreground loss: the target mask is resampled to
/// the logits' grid (nearest neighbour) and scored with mean BCE. The
/// weighting against the other terms happens in [`total_loss`], not here.
pub fn semantic_loss<T: Real>(logits: &Tensor<T>, target: &BinaryMask) -> Result<T> {
    let (h, w) = logits.dims2()?;
    let resized = nearest_resize_mask(target, h, w)?;
    bce_mask_loss(logits, &resized.to_tensor())
}

pub fn semantic_loss_backward<T: Real>(
    logits: &Tensor<T>,
    target: &BinaryMask,
    upstream: T,
) -> Result<Tensor<T>> {
    let (h, w) = logits.dims2()?;
    let resized = nearest_resize_mask(target, h, w)?;
    bce_mask_loss_backward(logits, &resized.to_tensor(), upstream)
}

/// Mean BCE over a set of per-point logits and hard targets.
pub fn point_loss<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    logits.dims1()?;
    bce_mask_loss(logits, targets)
}

pub fn point_loss_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>> {
    logits.dims1()?;
    bce_mask_loss_backward(logits, targets, upstream)
}

/// Hard 0/1 targets for a point set: the ground-truth mask is sampled
/// bilinearly at each location and thresholded at one half.
pub fn sample_point_targets<T: Real>(
    gt: &BinaryMask,
    points: &[(f64, f64)],
) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::Config("point target sampling needs at least one point".into()));
    }
    let as4 = gt.to_tensor::<f64>().with_shape(vec![1, 1, gt.height(), gt.width()])?;
    let sampled = sample_points_bilinear(&as4, points)?;
    Tensor::new(
        vec![points.len()],
        sampled
            .data()
            .iter()
            .map(|&v| if v > 0.5 { T::one() } else { T::zero() })
            .collect(),
    )
}

/// The individual objective terms, all mean-reduced and non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T: Real> {
    pub classification: T,
    pub centerness: T,
    pub localization: T,
    pub mask: T,
    pub semantic: T,
    pub points: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T: Real> {
    pub terms: LossTerms<T>,
    pub weighted_semantic: T,
    pub total: T,
}

/// Composes the objective:
/// `cls + ctr + loc + mask + 0.3 * semantic + points`, summed left to right.
pub fn total_loss<T: Real>(terms: &LossTerms<T>) -> Result<LossBreakdown<T>> {
    let named = [
        ("classification", terms.classification),
        ("centerness", terms.centerness),
        ("localization", terms.localization),
        ("mask", terms.mask),
        ("semantic", terms.semantic),
        ("points", terms.points),
    ];
    for (name, v) in named {
        if !v.is_finite() || v < T::zero() {
            return Err(Error::validation(
                "total_loss",
                format!("{} term must be finite and >= 0, got {}", name, v),
            ));
        }
    }
    let weighted_semantic = T::from_f64(SEMANTIC_LOSS_WEIGHT) * terms.semantic;
    let total = terms.classification
        + terms.centerness
        + terms.localization
        + terms.mask
        + weighted_semantic
        + terms.points;
    Ok(LossBreakdown { terms: *terms, weighted_semantic, total })
}
