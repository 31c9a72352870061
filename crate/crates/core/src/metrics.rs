//! Instance-overlap metrics on label rasters.
//!
//! A label raster assigns every pixel an instance id; id 0 is background.
//! The headline score averages, over ground-truth instances, the best Dice
//! overlap any predicted instance achieves, scaled to percent.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Per-pixel instance ids, row major; id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(
                "LabelImage::new",
                format!("extents must be >= 1, got {}x{}", width, height),
            ));
        }
        if ids.len() != width * height {
            return Err(Error::shape(
                "LabelImage::new",
                format!("{}x{} needs {} ids, got {}", width, height, width * height, ids.len()),
            ));
        }
        Ok(LabelImage { width, height, ids })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Distinct non-background ids, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.ids.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn mask_of(&self, id: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.ids.iter().map(|&v| v == id && id != 0).collect(),
        }
    }
}

/// Foreground mask of a single instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if ids_len_ok(width, height, data.len()) {
            Ok(BinaryMask { width, height, data })
        } else {
            Err(Error::shape(
                "BinaryMask::new",
                format!("{}x{} needs {} pixels, got {}", width, height, width * height, data.len()),
            ))
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// `(H, W)` tensor of zeros and ones.
    pub fn to_tensor<T: crate::tensor::Real>(&self) -> crate::tensor::Tensor<T> {
        crate::tensor::Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask extents are valid")
    }
}

fn ids_len_ok(width: usize, height: usize, len: usize) -> bool {
    width > 0 && height > 0 && len == width * height
}

/// Dice overlap of two masks: `2|A∩B| / (|A| + |B|)`. Two empty masks count
/// as a perfect match.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "dice",
            format!("mask sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    let inter = a
        .data
        .iter()
        .zip(b.data.iter())
        .filter(|&(&x, &y)| x && y)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Best match found for one ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMatch {
    pub gt_id: u32,
    /// `None` when the prediction contains no instances at all.
    pub best_pred_id: Option<u32>,
    pub dice: f64,
}

/// Result of [`best_dice`]: the percent score plus its per-instance breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BestDiceReport {
    pub score: f64,
    pub per_instance: Vec<InstanceMatch>,
    pub pred_instances: usize,
    pub gt_instances: usize,
}

/// Mean over ground-truth instances of the best Dice overlap achieved by any
/// predicted instance, in percent.
///
/// A ground truth without any instance leaves the mean undefined and errors.
/// A prediction without instances scores 0 for every ground-truth instance.
/// The result is invariant under relabeling of either raster: matching is
/// exhaustive, and the mean sums the per-instance values in sorted order so
/// even the floating-point rounding is independent of id assignment.
pub fn best_dice(pred: &LabelImage, gt: &LabelImage) -> Result<BestDiceReport> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::shape(
            "best_dice",
            format!(
                "raster sizes differ: {}x{} vs {}x{}",
                pred.width, pred.height, gt.width, gt.height
            ),
        ));
    }
    let gt_ids = gt.instance_ids();
    if gt_ids.is_empty() {
        return Err(Error::UndefinedMetric(
            "ground truth contains no instances, mean over instances is undefined".into(),
        ));
    }
    let pred_ids = pred.instance_ids();

    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pair: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.ids.iter().zip(pred.ids.iter()) {
        if g != 0 {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if g != 0 && p != 0 {
            *pair.entry((g, p)).or_insert(0) += 1;
        }
    }

    let mut per_instance = Vec::with_capacity(gt_ids.len());
    for &g in &gt_ids {
        let ga = gt_area[&g];
        let mut best: Option<(u32, f64)> = None;
        for &p in &pred_ids {
            let inter = pair.get(&(g, p)).copied().unwrap_or(0);
            let d = 2.0 * inter as f64 / (ga + pred_area[&p]) as f64;
            let better = match best {
                None => true,
                Some((_, bd)) => d > bd,
            };
            if better {
                best = Some((p, d));
            }
        }
        let (best_pred_id, d) = match best {
            Some((p, d)) => (Some(p), d),
            None => (None, 0.0),
        };
        per_instance.push(InstanceMatch { gt_id: g, best_pred_id, dice: d });
    }

    let mut values: Vec<f64> = per_instance.iter().map(|m| m.dice).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("dice values are finite"));
    let score = 100.0 * values.iter().sum::<f64>() / values.len() as f64;

    Ok(BestDiceReport {
        score,
        per_instance,
        pred_instances: pred_ids.len(),
        gt_instances: gt_ids.len(),
    })
}

/// The smaller of the two directed scores, so over- and under-segmentation
/// both get penalized.
pub fn symmetric_best_dice(a: &LabelImage, b: &LabelImage) -> Result<f64> {
    let ab = best_dice(a, b)?;
    let ba = best_dice(b, a)?;
    Ok(ab.score.min(ba.score))
}
