//! Mask assembly: crop a set of shared basis maps to a detection box, then
//! blend the crops with per-instance coefficient maps.
//!
//! The crop is an aligned bilinear pooling (2x2 samples per output bin,
//! averaged). Coefficients come in at a coarse resolution and are upscaled
//! bilinearly to the crop resolution before the blend. The assembled logit
//! map for one instance is the sum over bases of crop times coefficient,
//! which makes the whole step linear in both operands.

use crate::error::{Error, Result};
use crate::tensor::{
    resize_bilinear, resize_bilinear_backward, Real, Tensor,
};

/// Resolutions and basis count for the assembly step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblyConfig {
    /// Side length of the cropped basis maps and of the assembled mask.
    pub base_resolution: usize,
    /// Side length of the incoming coefficient maps.
    pub coeff_resolution: usize,
    /// Number of shared basis maps, equal to the coefficient maps per instance.
    pub num_bases: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            base_resolution: 56,
            coeff_resolution: 14,
            num_bases: 4,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_resolution == 0 || self.coeff_resolution == 0 {
            return Err(Error::Config("assembly resolutions must be >= 1".into()));
        }
        if self.coeff_resolution > self.base_resolution {
            return Err(Error::Config(format!(
                "coefficient resolution {} exceeds base resolution {}",
                self.coeff_resolution, self.base_resolution
            )));
        }
        if self.num_bases == 0 {
            return Err(Error::Config("at least one basis map is required".into()));
        }
        Ok(())
    }
}

/// Axis-aligned detection box in corner coordinates on the basis map:
/// `(0, 0)` is the outer corner of the top-left pixel, so a map of width `W`
/// spans `[0, W]`. Pixel centers sit at corner coordinate minus 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2, score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("x1", self.x1),
            ("y1", self.y1),
            ("x2", self.x2),
            ("y2", self.y2),
            ("score", self.score),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!("{} is not finite: {}", name, v)));
            }
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidBox(format!(
                "degenerate box: [{}, {}] x [{}, {}]",
                self.x1, self.x2, self.y1, self.y2
            )));
        }
        if self.score < 0.0 || self.score > 1.0 {
            return Err(Error::InvalidBox(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Intersects the box with the map's extent `[0, W] x [0, H]`; an empty
    /// intersection is a degenerate box.
    fn clipped(&self, width: usize, height: usize) -> Result<BoundingBox> {
        let b = BoundingBox {
            x1: self.x1.max(0.0),
            y1: self.y1.max(0.0),
            x2: self.x2.min(width as f64),
            y2: self.y2.min(height as f64),
            score: self.score,
        };
        if b.x2 <= b.x1 || b.y2 <= b.y1 {
            return Err(Error::InvalidBox(format!(
                "box [{}, {}] x [{}, {}] lies outside the {}x{} map",
                self.x1, self.x2, self.y1, self.y2, width, height
            )));
        }
        Ok(b)
    }
}

/// Interpolation stencil of one aligned-crop output pixel: four source taps.
struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

/// 2x2 sample positions inside bin `o` of `res` bins over span
/// `[lo, lo + res * bin]`, converted from corner to pixel-center coordinates.
fn bin_samples(lo: f64, bin: f64, o: usize) -> [f64; 2] {
    let start = lo + o as f64 * bin;
    [start + 0.25 * bin - 0.5, start + 0.75 * bin - 0.5]
}

fn crop_taps(b: &BoundingBox, res: usize, width: usize, height: usize) -> Vec<Tap> {
    let bin_w = (b.x2 - b.x1) / res as f64;
    let bin_h = (b.y2 - b.y1) / res as f64;
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    let mut taps = Vec::with_capacity(res * res * 4);
    for oy in 0..res {
        let sy = bin_samples(b.y1, bin_h, oy);
        for ox in 0..res {
            let sx = bin_samples(b.x1, bin_w, ox);
            for &y in &sy {
                let y = y.clamp(0.0, max_y);
                let y0 = y.floor();
                let y1 = (y0 + 1.0).min(max_y);
                let fy = y - y0;
                for &x in &sx {
                    let x = x.clamp(0.0, max_x);
                    let x0 = x.floor();
                    let x1 = (x0 + 1.0).min(max_x);
                    let fx = x - x0;
                    let (y0u, y1u, x0u, x1u) =
                        (y0 as usize, y1 as usize, x0 as usize, x1 as usize);
                    // Each of the four samples contributes a quarter of the bin.
                    taps.push(Tap {
                        idx: [
                            y0u * width + x0u,
                            y0u * width + x1u,
                            y1u * width + x0u,
                            y1u * width + x1u,
                        ],
                        w: [
                            0.25 * (1.0 - fy) * (1.0 - fx),
                            0.25 * (1.0 - fy) * fx,
                            0.25 * fy * (1.0 - fx),
                            0.25 * fy * fx,
                        ],
                    });
                }
            }
        }
    }
    taps
}

/// Crops every basis map `(K, H, W)` to `box_` at `res x res`, averaging 2x2
/// interior bilinear samples per output bin. Returns `(K, res, res)`.
pub fn roi_align<T: Real>(bases: &Tensor<T>, box_: &BoundingBox, res: usize) -> Result<Tensor<T>> {
    let (k, h, w) = bases.dims3()?;
    if res == 0 {
        return Err(Error::Config("crop resolution must be >= 1".into()));
    }
    box_.validate()?;
    let clipped = box_.clipped(w, h)?;
    let taps = crop_taps(&clipped, res, w, h);

    let mut out = Tensor::zeros(vec![k, res, res])?;
    let data = bases.data();
    let out_data = out.data_mut();
    for ki in 0..k {
        let plane = ki * h * w;
        let out_plane = ki * res * res;
        for (cell, chunk) in taps.chunks_exact(4).enumerate() {
            let mut acc = T::zero();
            for tap in chunk {
                for s in 0..4 {
                    acc += data[plane + tap.idx[s]] * T::from_f64(tap.w[s]);
                }
            }
            out_data[out_plane + cell] = acc;
        }
    }
    Ok(out)
}

/// Backward pass of [`roi_align`] with respect to the basis maps.
pub fn roi_align_backward<T: Real>(
    bases: &Tensor<T>,
    box_: &BoundingBox,
    res: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (k, h, w) = bases.dims3()?;
    let (gk, gh, gw) = grad_out.dims3()?;
    if (gk, gh, gw) != (k, res, res) {
        return Err(Error::shape(
            "roi_align_backward",
            format!("gradient {:?} does not match ({}, {}, {})", grad_out.shape(), k, res, res),
        ));
    }
    box_.validate()?;
    let clipped = box_.clipped(w, h)?;
    let taps = crop_taps(&clipped, res, w, h);

    let mut grad = Tensor::zeros(vec![k, h, w])?;
    let go = grad_out.data();
    let gi = grad.data_mut();
    for ki in 0..k {
        let plane = ki * h * w;
        let out_plane = ki * res * res;
        for (cell, chunk) in taps.chunks_exact(4).enumerate() {
            let g = go[out_plane + cell];
            for tap in chunk {
                for s in 0..4 {
                    gi[plane + tap.idx[s]] += g * T::from_f64(tap.w[s]);
                }
            }
        }
    }
    Ok(grad)
}

/// Upscales one instance's coefficient maps `(K, r, r)` to `(K, res, res)`
/// bilinearly.
pub fn upscale_coefficients<T: Real>(coeffs: &Tensor<T>, res: usize) -> Result<Tensor<T>> {
    let (k, rh, rw) = coeffs.dims3()?;
    let as4 = coeffs.with_shape(vec![1, k, rh, rw])?;
    let up = resize_bilinear(&as4, res, res)?;
    up.with_shape(vec![k, res, res])
}

pub fn upscale_coefficients_backward<T: Real>(
    coeffs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (k, rh, rw) = coeffs.dims3()?;
    let (gk, gh, gw) = grad_out.dims3()?;
    if gk != k {
        return Err(Error::shape(
            "upscale_coefficients_backward",
            format!("gradient has {} maps, coefficients have {}", gk, k),
        ));
    }
    let as4 = coeffs.with_shape(vec![1, k, rh, rw])?;
    let go4 = grad_out.with_shape(vec![1, gk, gh, gw])?;
    let grad = resize_bilinear_backward(&as4, &go4)?;
    grad.with_shape(vec![k, rh, rw])
}

/// Blends cropped bases with upscaled coefficients: elementwise product
/// summed over the basis axis. Both operands are `(K, R, R)`; the result is
/// `(R, R)` and linear in each operand.
pub fn assemble<T: Real>(crops: &Tensor<T>, coeffs_up: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, h, w) = crops.dims3()?;
    if crops.shape() != coeffs_up.shape() {
        return Err(Error::shape(
            "assemble",
            format!("crops {:?} vs coefficients {:?}", crops.shape(), coeffs_up.shape()),
        ));
    }
    let mut out = Tensor::zeros(vec![h, w])?;
    let a = crops.data();
    let b = coeffs_up.data();
    let out_data = out.data_mut();
    for ki in 0..k {
        let plane = ki * h * w;
        for (o, i) in out_data.iter_mut().zip(0..h * w) {
            *o += a[plane + i] * b[plane + i];
        }
    }
    Ok(out)
}

/// Backward pass of [`assemble`]: the gradient broadcasts over the basis
/// axis and multiplies the opposite operand.
pub fn assemble_backward<T: Real>(
    crops: &Tensor<T>,
    coeffs_up: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k, h, w) = crops.dims3()?;
    let (gh, gw) = grad_out.dims2()?;
    if crops.shape() != coeffs_up.shape() || (gh, gw) != (h, w) {
        return Err(Error::shape(
            "assemble_backward",
            format!(
                "crops {:?}, coefficients {:?}, gradient {:?}",
                crops.shape(),
                coeffs_up.shape(),
                grad_out.shape()
            ),
        ));
    }
    let mut grad_crops = Tensor::zeros(vec![k, h, w])?;
    let mut grad_coeffs = Tensor::zeros(vec![k, h, w])?;
    let go = grad_out.data();
    for ki in 0..k {
        let plane = ki * h * w;
        for i in 0..h * w {
            grad_crops.data_mut()[plane + i] = go[i] * coeffs_up.data()[plane + i];
            grad_coeffs.data_mut()[plane + i] = go[i] * crops.data()[plane + i];
        }
    }
    Ok((grad_crops, grad_coeffs))
}

/// Full assembly of one instance: crop, upscale, blend.
pub fn assemble_instance<T: Real>(
    bases: &Tensor<T>,
    coeffs: &Tensor<T>,
    box_: &BoundingBox,
    cfg: &AssemblyConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (k, _, _) = bases.dims3()?;
    let (ck, crh, crw) = coeffs.dims3()?;
    if k != cfg.num_bases || ck != cfg.num_bases {
        return Err(Error::shape(
            "assemble_instance",
            format!(
                "K mismatch: config expects {}, bases carry {}, coefficients carry {}",
                cfg.num_bases, k, ck
            ),
        ));
    }
    if (crh, crw) != (cfg.coeff_resolution, cfg.coeff_resolution) {
        return Err(Error::shape(
            "assemble_instance",
            format!(
                "coefficients are {}x{}, config expects {}x{}",
                crh, crw, cfg.coeff_resolution, cfg.coeff_resolution
            ),
        ));
    }
    let crops = roi_align(bases, box_, cfg.base_resolution)?;
    let up = upscale_coefficients(coeffs, cfg.base_resolution)?;
    assemble(&crops, &up)
}

/// Assembles a batch of instances against shared bases. The outer `Result`
/// carries global shape problems; each inner entry carries that instance's
/// own outcome so one bad box does not sink the batch.
#[allow(clippy::type_complexity)]
pub fn assemble_instances<T: Real>(
    bases: &Tensor<T>,
    coeffs: &[Tensor<T>],
    boxes: &[BoundingBox],
    cfg: &AssemblyConfig,
) -> Result<Vec<Result<Tensor<T>>>> {
    cfg.validate()?;
    if coeffs.len() != boxes.len() {
        return Err(Error::shape(
            "assemble_instances",
            format!("{} coefficient sets vs {} boxes", coeffs.len(), boxes.len()),
        ));
    }
    let (k, _, _) = bases.dims3()?;
    if k != cfg.num_bases {
        return Err(Error::shape(
            "assemble_instances",
            format!("K mismatch: config expects {}, bases carry {}", cfg.num_bases, k),
        ));
    }
    Ok(boxes
        .iter()
        .zip(coeffs.iter())
        .map(|(b, c)| assemble_instance(bases, c, b, cfg))
        .collect())
}
