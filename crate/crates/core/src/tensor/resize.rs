use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One interpolation axis: two source indices and the weight of the second.
/// Coordinates outside the map clamp to the border pixel.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn lerp_coord(v: f64, extent: usize) -> Lerp {
    let max = (extent - 1) as f64;
    let v = v.clamp(0.0, max);
    let lo = v.floor();
    let hi = (lo + 1.0).min(max);
    Lerp {
        lo: lo as usize,
        hi: hi as usize,
        frac: v - lo,
    }
}

/// Maps an output pixel center onto the source grid so that pixel centers of
/// both grids align at the corners: `src = (dst + 0.5) * extent_ratio - 0.5`.
fn src_coord(dst: usize, src_extent: usize, dst_extent: usize) -> f64 {
    (dst as f64 + 0.5) * (src_extent as f64 / dst_extent as f64) - 0.5
}

/// Bilinear resize of `(N, C, H, W)` to `(N, C, out_h, out_w)` with
/// half-pixel-center alignment and edge clamping.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("target extent must be >= 1, got {}x{}", out_h, out_w),
        ));
    }
    let ys: Vec<Lerp> = (0..out_h).map(|oy| lerp_coord(src_coord(oy, h, out_h), h)).collect();
    let xs: Vec<Lerp> = (0..out_w).map(|ox| lerp_coord(src_coord(ox, w, out_w), w)).collect();

    let mut out = Tensor::zeros(vec![n, c, out_h, out_w])?;
    let data = input.data();
    let out_data = out.data_mut();
    let mut flat = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let plane = ((b * c + ch) * h) * w;
            for ly in &ys {
                let wy1 = T::from_f64(ly.frac);
                let wy0 = T::one() - wy1;
                for lx in &xs {
                    let wx1 = T::from_f64(lx.frac);
                    let wx0 = T::one() - wx1;
                    out_data[flat] = data[plane + ly.lo * w + lx.lo] * wy0 * wx0
                        + data[plane + ly.lo * w + lx.hi] * wy0 * wx1
                        + data[plane + ly.hi * w + lx.lo] * wy1 * wx0
                        + data[plane + ly.hi * w + lx.hi] * wy1 * wx1;
                    flat += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`resize_bilinear`]: scatters each output gradient onto
/// the four source pixels with the forward interpolation weights.
pub fn resize_bilinear_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (gn, gc, out_h, out_w) = grad_out.dims4()?;
    if (gn, gc) != (n, c) {
        return Err(Error::shape(
            "resize_bilinear_backward",
            format!("gradient {:?} does not match input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let ys: Vec<Lerp> = (0..out_h).map(|oy| lerp_coord(src_coord(oy, h, out_h), h)).collect();
    let xs: Vec<Lerp> = (0..out_w).map(|ox| lerp_coord(src_coord(ox, w, out_w), w)).collect();

    let mut grad_in = Tensor::zeros(vec![n, c, h, w])?;
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    let mut flat = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let plane = ((b * c + ch) * h) * w;
            for ly in &ys {
                let wy1 = T::from_f64(ly.frac);
                let wy0 = T::one() - wy1;
                for lx in &xs {
                    let wx1 = T::from_f64(lx.frac);
                    let wx0 = T::one() - wx1;
                    let g = go[flat];
                    gi[plane + ly.lo * w + lx.lo] += g * wy0 * wx0;
                    gi[plane + ly.lo * w + lx.hi] += g * wy0 * wx1;
                    gi[plane + ly.hi * w + lx.lo] += g * wy1 * wx0;
                    gi[plane + ly.hi * w + lx.hi] += g * wy1 * wx1;
                    flat += 1;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Samples `(N, C, H, W)` at continuous positions given in pixel-center
/// coordinates, returning `(N, C, P)`. A point at integer coordinates
/// reproduces that pixel's value exactly; positions outside the map clamp to
/// the border.
pub fn sample_points_bilinear<T: Real>(
    input: &Tensor<T>,
    points: &[(f64, f64)],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if points.is_empty() {
        return Err(Error::Config("sample_points_bilinear requires at least one point".into()));
    }
    for (i, &(x, y)) in points.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::validation(
                "sample_points_bilinear",
                format!("point {} has non-finite coordinates ({}, {})", i, x, y),
            ));
        }
    }
    let lerps: Vec<(Lerp, Lerp)> = points
        .iter()
        .map(|&(x, y)| (lerp_coord(x, w), lerp_coord(y, h)))
        .collect();

    let mut out = Tensor::zeros(vec![n, c, points.len()])?;
    let data = input.data();
    let out_data = out.data_mut();
    let mut flat = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let plane = ((b * c + ch) * h) * w;
            for (lx, ly) in &lerps {
                let wy1 = T::from_f64(ly.frac);
                let wy0 = T::one() - wy1;
                let wx1 = T::from_f64(lx.frac);
                let wx0 = T::one() - wx1;
                out_data[flat] = data[plane + ly.lo * w + lx.lo] * wy0 * wx0
                    + data[plane + ly.lo * w + lx.hi] * wy0 * wx1
                    + data[plane + ly.hi * w + lx.lo] * wy1 * wx0
                    + data[plane + ly.hi * w + lx.hi] * wy1 * wx1;
                flat += 1;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`sample_points_bilinear`]: scatters `(N, C, P)`
/// gradients back onto the source map.
pub fn sample_points_bilinear_backward<T: Real>(
    input: &Tensor<T>,
    points: &[(f64, f64)],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (gn, gc, gp) = grad_out.dims3()?;
    if (gn, gc, gp) != (n, c, points.len()) {
        return Err(Error::shape(
            "sample_points_bilinear_backward",
            format!(
                "gradient {:?} does not match ({}, {}, {}) samples",
                grad_out.shape(),
                n,
                c,
                points.len()
            ),
        ));
    }
    let lerps: Vec<(Lerp, Lerp)> = points
        .iter()
        .map(|&(x, y)| (lerp_coord(x, w), lerp_coord(y, h)))
        .collect();

    let mut grad_in = Tensor::zeros(vec![n, c, h, w])?;
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    let mut flat = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let plane = ((b * c + ch) * h) * w;
            for (lx, ly) in &lerps {
                let wy1 = T::from_f64(ly.frac);
                let wy0 = T::one() - wy1;
                let wx1 = T::from_f64(lx.frac);
                let wx0 = T::one() - wx1;
                let g = go[flat];
                gi[plane + ly.lo * w + lx.lo] += g * wy0 * wx0;
                gi[plane + ly.lo * w + lx.hi] += g * wy0 * wx1;
                gi[plane + ly.hi * w + lx.lo] += g * wy1 * wx0;
                gi[plane + ly.hi * w + lx.hi] += g * wy1 * wx1;
                flat += 1;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_resize_is_exact() {
        let input = t(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = resize_bilinear(&input, 2, 3).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn doubling_a_2x2_map_hand_checked() {
        // Half-pixel centers: output pixel 0 maps to src -0.25 (clamps to 0),
        // pixel 1 maps to 0.25, pixel 2 to 0.75, pixel 3 to 1.25.
        let input = t(vec![1, 1, 1, 2], vec![0.0, 4.0]);
        let out = resize_bilinear(&input, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn downscale_averages_neighbourhoods() {
        let input = t(vec![1, 1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]);
        let out = resize_bilinear(&input, 1, 2).unwrap();
        // Output centers land at src 0.5 and 2.5.
        assert_eq!(out.data(), &[1.0, 5.0]);
    }

    #[test]
    fn resize_backward_is_transpose_of_forward() {
        // For a linear map, forward applied to a one-hot input must equal the
        // backward scatter of a one-hot gradient read the other way round.
        let h = 3;
        let w = 4;
        let (oh, ow) = (5, 7);
        for src in 0..h * w {
            let mut one_hot = Tensor::<f64>::zeros(vec![1, 1, h, w]).unwrap();
            one_hot.data_mut()[src] = 1.0;
            let fwd = resize_bilinear(&one_hot, oh, ow).unwrap();
            for dst in 0..oh * ow {
                let mut g = Tensor::<f64>::zeros(vec![1, 1, oh, ow]).unwrap();
                g.data_mut()[dst] = 1.0;
                let back = resize_bilinear_backward(&one_hot, &g).unwrap();
                assert_relative_eq!(fwd.data()[dst], back.data()[src], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn integer_points_hit_pixels_exactly() {
        let input = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = sample_points_bilinear(&input, &[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, 4]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn midpoint_sample_averages_four_corners() {
        let input = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = sample_points_bilinear(&input, &[(0.5, 0.5)]).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn out_of_range_points_clamp_to_border() {
        let input = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = sample_points_bilinear(&input, &[(-5.0, -5.0), (9.0, 9.0)]).unwrap();
        assert_eq!(out.data(), &[1.0, 4.0]);
    }

    #[test]
    fn empty_point_list_is_config_error() {
        let input = t(vec![1, 1, 2, 2], vec![0.0; 4]);
        assert!(matches!(
            sample_points_bilinear(&input, &[]),
            Err(Error::Config(_))
        ));
    }
}
