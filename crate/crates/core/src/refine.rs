//! Boundary refinement of coarse mask logits by re-classifying a budget of
//! uncertain points.
//!
//! Uncertainty of a logit is the closeness of its probability to one half.
//! During training a point set is sampled with a bias toward uncertain
//! locations; at inference the logit map is repeatedly doubled bilinearly
//! and the most uncertain grid points of each doubling are re-predicted by a
//! small pointwise head fed with fine features and the coarse logit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{kaiming_conv, seeded_rng};
use crate::metrics::BinaryMask;
use crate::tensor::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, relu_neg_slope,
    relu_neg_slope_backward, resize_bilinear, sample_points_bilinear, sigmoid_scalar, ConvGrads,
    ConvParams, Real, Tensor,
};
use rand_chacha::ChaCha8Rng;

/// Knobs of the refinement stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Oversampling factor for training-time candidates.
    pub beta: f64,
    /// Fraction of the point budget taken by the most uncertain candidates.
    pub alpha: f64,
    /// Point budget per sampling call and per subdivision step.
    pub num_points: usize,
    /// Number of 2x subdivision steps at inference.
    pub steps: usize,
    /// Depth of the pointwise head.
    pub num_layers: usize,
    /// Width of the pointwise head.
    pub hidden: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            beta: 3.0,
            alpha: 0.75,
            num_points: 784,
            steps: 3,
            num_layers: 3,
            hidden: 256,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 1.0 {
            return Err(Error::Config(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.num_points == 0 {
            return Err(Error::Config("point budget must be >= 1".into()));
        }
        if self.num_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("pointwise head needs num_layers >= 1 and hidden >= 1".into()));
        }
        Ok(())
    }
}

/// How close the logit's probability sits to one half; 0 is maximal
/// uncertainty, more negative is more confident.
pub fn uncertainty<T: Real>(logit: T) -> T {
    -(sigmoid_scalar(logit) - T::from_f64(0.5)).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    /// Chosen for ranking among the most uncertain candidates.
    Uncertain,
    /// Drawn at random from the remaining candidates.
    Random,
}

/// A sampled location in pixel-center coordinates of the logit map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedPoint {
    pub x: f64,
    pub y: f64,
    pub kind: PointKind,
}

/// Training-time point sampling over a `(H, W)` logit map.
///
/// Draws `ceil(beta * n)` distinct uniform candidates, keeps the
/// `floor(alpha * n)` most uncertain, and fills the budget with a uniform
/// draw from the leftover candidates. The returned set therefore always has
/// exactly `n` points, the uncertain subset never ranks below the random
/// one, and the whole procedure is a pure function of `(logits, cfg, seed)`.
pub fn sample_points_train<T: Real>(
    logits: &Tensor<T>,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Vec<SelectedPoint>> {
    cfg.validate()?;
    let (h, w) = logits.dims2()?;
    let n = cfg.num_points;
    let m = ((cfg.beta * n as f64).ceil() as usize).max(n);

    let mut rng = seeded_rng(seed);
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(m);
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    while coords.len() < m {
        let x = if max_x > 0.0 { rng.gen_range(0.0..max_x) } else { 0.0 };
        let y = if max_y > 0.0 { rng.gen_range(0.0..max_y) } else { 0.0 };
        // Exact duplicates would make "distinct candidates" ambiguous.
        if !coords.iter().any(|&(cx, cy)| cx == x && cy == y) {
            coords.push((x, y));
        }
    }

    let as4 = logits.with_shape(vec![1, 1, h, w])?;
    let sampled = sample_points_bilinear(&as4, &coords)?;
    let unc: Vec<f64> = sampled.data().iter().map(|&l| uncertainty(l).to_f64()).collect();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        unc[b].partial_cmp(&unc[a]).expect("uncertainties are finite").then(a.cmp(&b))
    });

    let k = ((cfg.alpha * n as f64).floor() as usize).min(n);
    let mut points: Vec<SelectedPoint> = order[..k]
        .iter()
        .map(|&i| SelectedPoint { x: coords[i].0, y: coords[i].1, kind: PointKind::Uncertain })
        .collect();

    // Partial Fisher-Yates over the leftover candidates.
    let mut rest: Vec<usize> = order[k..].to_vec();
    for slot in 0..n - k {
        let pick = slot + rng.gen_range(0..rest.len() - slot);
        rest.swap(slot, pick);
        let i = rest[slot];
        points.push(SelectedPoint { x: coords[i].0, y: coords[i].1, kind: PointKind::Random });
    }
    Ok(points)
}

/// The `n` most uncertain grid points of a `(H, W)` logit map, most
/// uncertain first; equal uncertainty breaks toward the lower flat index.
pub fn select_points_inference<T: Real>(
    logits: &Tensor<T>,
    n: usize,
) -> Result<Vec<(usize, usize)>> {
    let (h, w) = logits.dims2()?;
    if n == 0 || n > h * w {
        return Err(Error::Config(format!(
            "point budget {} outside 1..={} grid points",
            n,
            h * w
        )));
    }
    let unc: Vec<f64> = logits.data().iter().map(|&l| uncertainty(l).to_f64()).collect();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        unc[b].partial_cmp(&unc[a]).expect("uncertainties are finite").then(a.cmp(&b))
    });
    Ok(order[..n].iter().map(|&i| (i % w, i / w)).collect())
}

/// Pointwise re-classification head: a stack of 1x1 layers over per-point
/// feature vectors, with the coarse logit appended to every layer's input.
#[derive(Debug, Clone)]
pub struct PointPredictor<T: Real> {
    pub layers: Vec<ConvParams<T>>,
}

#[derive(Debug, Clone)]
pub struct PredictTrace<T: Real> {
    pub(crate) coarse4: Tensor<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) pres: Vec<Tensor<T>>,
}

impl<T: Real> PointPredictor<T> {
    /// `feature_channels` per-point feature dims; the head sees that plus the
    /// coarse logit. A single-layer head maps straight to the refined logit.
    pub fn kaiming(
        feature_channels: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("pointwise head needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut in_c = feature_channels + 1;
        for i in 0..num_layers {
            let out_c = if i + 1 == num_layers { 1 } else { hidden };
            layers.push(kaiming_conv(out_c, in_c, 1, 1.0, rng)?);
            in_c = hidden + 1;
        }
        Ok(PointPredictor { layers })
    }

    pub fn zeros(feature_channels: usize, hidden: usize, num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("pointwise head needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut in_c = feature_channels + 1;
        for i in 0..num_layers {
            let out_c = if i + 1 == num_layers { 1 } else { hidden };
            layers.push(ConvParams::same(
                Tensor::zeros(vec![out_c, in_c, 1, 1])?,
                vec![T::zero(); out_c],
            )?);
            in_c = hidden + 1;
        }
        Ok(PointPredictor { layers })
    }

    pub fn feature_channels(&self) -> usize {
        self.layers[0].in_channels() - 1
    }

    /// Refined logits for `(C, P)` fine features and `(P,)` coarse logits.
    pub fn predict(&self, fine: &Tensor<T>, coarse: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_trace(fine, coarse)?.0)
    }

    pub fn predict_trace(
        &self,
        fine: &Tensor<T>,
        coarse: &Tensor<T>,
    ) -> Result<(Tensor<T>, PredictTrace<T>)> {
        let (c, p) = fine.dims2()?;
        if coarse.shape() != [p] {
            return Err(Error::shape(
                "PointPredictor::predict",
                format!("coarse logits {:?} do not match {} points", coarse.shape(), p),
            ));
        }
        if c + 1 != self.layers[0].in_channels() {
            return Err(Error::shape(
                "PointPredictor::predict",
                format!(
                    "head expects {} feature channels, got {}",
                    self.layers[0].in_channels() - 1,
                    c
                ),
            ));
        }
        let coarse4 = coarse.with_shape(vec![1, 1, 1, p])?;
        let fine4 = fine.with_shape(vec![1, c, 1, p])?;
        let mut h = concat_channels(&fine4, &coarse4)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let z = conv2d(&h, layer)?;
            if i == last {
                let out = z.with_shape(vec![p])?;
                return Ok((out, PredictTrace { coarse4, inputs, pres }));
            }
            let act = relu_neg_slope(&z, 0.0);
            pres.push(z);
            h = concat_channels(&act, &coarse4)?;
        }
        unreachable!("layers is non-empty");
    }

    /// Gradients of the refined logits with respect to every layer, the fine
    /// features and the coarse logits. The coarse gradient collects the
    /// contributions of every layer input it was appended to.
    pub fn predict_backward(
        &self,
        trace: &PredictTrace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Vec<ConvGrads<T>>, Tensor<T>, Tensor<T>)> {
        let p = trace.coarse4.shape()[3];
        if grad_logits.shape() != [p] {
            return Err(Error::shape(
                "PointPredictor::predict_backward",
                format!("gradient {:?} does not match {} points", grad_logits.shape(), p),
            ));
        }
        let last = self.layers.len() - 1;
        let mut g = grad_logits.with_shape(vec![1, 1, 1, p])?;
        let mut grad_coarse = Tensor::zeros(vec![1, 1, 1, p])?;
        let mut layer_grads = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (g_in, cg) = conv2d_backward(&trace.inputs[i], &self.layers[i], &g)?;
            layer_grads[i] = Some(cg);
            let split = self.layers[i].in_channels() - 1;
            let (g_main, g_coarse_part) = concat_channels_backward(&g_in, split)?;
            for (acc, v) in grad_coarse.data_mut().iter_mut().zip(g_coarse_part.data()) {
                *acc += *v;
            }
            if i == 0 {
                let grad_fine = g_main.with_shape(vec![split, p])?;
                return Ok((
                    layer_grads.into_iter().map(|g| g.expect("filled in reverse")).collect(),
                    grad_fine,
                    grad_coarse.with_shape(vec![p])?,
                ));
            }
            g = relu_neg_slope_backward(&trace.pres[i - 1], 0.0, &g_main)?;
        }
        unreachable!("loop returns at layer 0; last index {} unused", last);
    }
}

/// Inference-time refinement: `steps` rounds of bilinear doubling, each
/// followed by re-predicting the `num_points` most uncertain grid points
/// (fewer only if the grid itself is smaller). Feature lookups translate
/// grid centers into the feature map's pixel-center frame.
pub fn refine_mask<T: Real>(
    coarse: &Tensor<T>,
    features: &Tensor<T>,
    predictor: &PointPredictor<T>,
    cfg: &RefineConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, _) = coarse.dims2()?;
    let (fc, fh, fw) = features.dims3()?;
    if fc != predictor.feature_channels() {
        return Err(Error::shape(
            "refine_mask",
            format!("features carry {} channels, head expects {}", fc, predictor.feature_channels()),
        ));
    }
    let features4 = features.with_shape(vec![1, fc, fh, fw])?;

    let mut cur = coarse.clone();
    for _ in 0..cfg.steps {
        let (h, w) = cur.dims2()?;
        let (nh, nw) = (2 * h, 2 * w);
        let up = resize_bilinear(&cur.with_shape(vec![1, 1, h, w])?, nh, nw)?;
        let mut up = up.with_shape(vec![nh, nw])?;

        let n = cfg.num_points.min(nh * nw);
        let grid_points = select_points_inference(&up, n)?;
        let feat_coords: Vec<(f64, f64)> = grid_points
            .iter()
            .map(|&(gx, gy)| {
                (
                    (gx as f64 + 0.5) * (fw as f64 / nw as f64) - 0.5,
                    (gy as f64 + 0.5) * (fh as f64 / nh as f64) - 0.5,
                )
            })
            .collect();
        let fine = sample_points_bilinear(&features4, &feat_coords)?.with_shape(vec![fc, n])?;
        let coarse_vals =
            Tensor::new(vec![n], grid_points.iter().map(|&(gx, gy)| up.at2(gy, gx)).collect())?;
        let refined = predictor.predict(&fine, &coarse_vals)?;
        for (&(gx, gy), &v) in grid_points.iter().zip(refined.data()) {
            up.data_mut()[gy * nw + gx] = v;
        }
        cur = up;
    }
    Ok(cur)
}

/// Positive logits are foreground; zero is background.
pub fn binarize<T: Real>(logits: &Tensor<T>) -> Result<BinaryMask> {
    let (h, w) = logits.dims2()?;
    BinaryMask::new(w, h, logits.data().iter().map(|&l| l > T::zero()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit_map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![h, w], |i| f(i[1], i[0])).unwrap()
    }

    #[test]
    fn uncertainty_peaks_at_zero_logit() {
        assert_eq!(uncertainty(0.0f64), 0.0);
        assert!(uncertainty(0.1f64) > uncertainty(2.0f64));
        assert!((uncertainty(3.0f64) - uncertainty(-3.0f64)).abs() < 1e-12);
    }

    #[test]
    fn train_sampling_fills_the_exact_budget() {
        let logits = logit_map(20, 20, |x, y| (x as f64 - 9.7) * 0.3 + (y as f64) * 0.01);
        let cfg = RefineConfig { num_points: 16, ..RefineConfig::default() };
        let pts = sample_points_train(&logits, &cfg, 42).unwrap();
        assert_eq!(pts.len(), 16);
        let uncertain = pts.iter().filter(|p| p.kind == PointKind::Uncertain).count();
        assert_eq!(uncertain, 12);
        for p in &pts {
            assert!(p.x >= 0.0 && p.x <= 19.0 && p.y >= 0.0 && p.y <= 19.0);
        }
    }

    #[test]
    fn uncertain_points_never_rank_below_random_ones() {
        let logits = logit_map(16, 16, |x, y| (x as f64 + y as f64) * 0.2 - 2.5);
        let cfg = RefineConfig { num_points: 24, ..RefineConfig::default() };
        for seed in 0..20 {
            let pts = sample_points_train(&logits, &cfg, seed).unwrap();
            let sample_unc = |p: &SelectedPoint| {
                let as4 = logits.with_shape(vec![1, 1, 16, 16]).unwrap();
                let v = sample_points_bilinear(&as4, &[(p.x, p.y)]).unwrap();
                uncertainty(v.data()[0])
            };
            let min_uncertain = pts
                .iter()
                .filter(|p| p.kind == PointKind::Uncertain)
                .map(sample_unc)
                .fold(f64::INFINITY, f64::min);
            let max_random = pts
                .iter()
                .filter(|p| p.kind == PointKind::Random)
                .map(sample_unc)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_uncertain >= max_random, "seed {}", seed);
        }
    }

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let logits = logit_map(12, 9, |x, y| (x * 3 + y) as f64 * 0.1 - 1.0);
        let cfg = RefineConfig { num_points: 10, ..RefineConfig::default() };
        let a = sample_points_train(&logits, &cfg, 7).unwrap();
        let b = sample_points_train(&logits, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_points_train(&logits, &cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn inference_selection_prefers_logits_near_zero() {
        let logits = Tensor::new(vec![2, 2], vec![7.0, 0.5, 0.5, -0.1]).unwrap();
        let pts = select_points_inference(&logits, 3).unwrap();
        // Closest to zero first; the duplicated 0.5 ties break toward the
        // lower flat index.
        assert_eq!(pts[0], (1, 1));
        assert_eq!(pts[1], (1, 0));
        assert_eq!(pts[2], (0, 1));
    }

    #[test]
    fn oversized_budget_is_a_config_error() {
        let logits = logit_map(3, 3, |_, _| 1.0);
        assert!(matches!(select_points_inference(&logits, 10), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_predicts_zero_logits() {
        let head = PointPredictor::<f64>::zeros(5, 8, 3).unwrap();
        let fine = Tensor::filled(vec![5, 7], 2.0).unwrap();
        let coarse = Tensor::filled(vec![7], -3.0).unwrap();
        let out = head.predict(&fine, &coarse).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coarse_logit_feeds_every_layer() {
        let mut rng = seeded_rng(3);
        let head = PointPredictor::<f64>::kaiming(2, 4, 3, &mut rng).unwrap();
        let fine = Tensor::filled(vec![2, 5], 0.3).unwrap();
        let coarse_a = Tensor::filled(vec![5], 0.0).unwrap();
        let coarse_b = Tensor::filled(vec![5], 1.0).unwrap();
        let out_a = head.predict(&fine, &coarse_a).unwrap();
        let out_b = head.predict(&fine, &coarse_b).unwrap();
        assert!(out_a.data().iter().zip(out_b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn refinement_doubles_resolution_per_step() {
        let coarse = logit_map(7, 5, |x, y| (x as f64 - 2.0) + (y as f64 - 3.0) * 0.5);
        let features = Tensor::filled(vec![3, 14, 10], 0.1).unwrap();
        let head = PointPredictor::<f64>::zeros(3, 4, 2).unwrap();
        let cfg = RefineConfig { num_points: 6, steps: 2, ..RefineConfig::default() };
        let out = refine_mask(&coarse, &features, &head, &cfg).unwrap();
        assert_eq!(out.shape(), &[28, 20]);
    }

    #[test]
    fn binarize_counts_only_positive_logits() {
        let logits = logit_map(1, 3, |x, _| x as f64 - 1.0);
        let mask = binarize(&logits).unwrap();
        assert_eq!(mask.data(), &[false, false, true]);
    }
}
