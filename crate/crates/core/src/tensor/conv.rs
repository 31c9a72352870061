use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights and bias of one 2-d convolution layer.
///
/// Weights are laid out `(out_channels, in_channels, k_h, k_w)`; the
/// convolution is a cross-correlation with zero padding. Stride other than 1
/// is rejected at application time; the field exists so parameter files can
/// carry it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let (out_c, _, _, _) = weights.dims4()?;
        if bias.len() != out_c {
            return Err(Error::shape(
                "ConvParams::new",
                format!("bias length {} does not match {} output channels", bias.len(), out_c),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(ConvParams { weights, bias, stride, padding })
    }

    /// Convenience for a layer that preserves spatial extent: odd kernel,
    /// padding `(k - 1) / 2`, stride 1.
    pub fn same(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let (_, _, kh, kw) = weights.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "same-padding conv requires odd kernel extents, got {}x{}",
                kh, kw
            )));
        }
        Self::new(weights, bias, 1, (kh - 1) / 2)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Gradients of one convolution layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Cross-correlation of `input` `(N, C_in, H, W)` with zero padding.
///
/// Output is `(N, C_out, H_out, W_out)` where `H_out = H + 2p - kH + 1`.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, c_in, h, w) = input.dims4()?;
    let (out_c, w_in_c, kh, kw) = params.weights.dims4()?;
    if c_in != w_in_c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weights expect {}", c_in, w_in_c),
        ));
    }
    if params.stride != 1 {
        return Err(Error::Config(format!(
            "conv2d supports stride 1 only, got {}",
            params.stride
        )));
    }
    let p = params.padding;
    let (h_out, w_out) = out_extent(h, w, kh, kw, p)?;

    let mut out = Tensor::zeros(vec![n, out_c, h_out, w_out])?;
    let in_data = input.data();
    let w_data = params.weights.data();
    let out_data = out.data_mut();
    for b in 0..n {
        for oc in 0..out_c {
            let bias = params.bias[oc];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias;
                    for ic in 0..c_in {
                        let in_plane = ((b * c_in + ic) * h) * w;
                        let w_plane = ((oc * c_in + ic) * kh) * kw;
                        for ky in 0..kh {
                            let iy = oy + ky;
                            if iy < p || iy >= h + p {
                                continue;
                            }
                            let iy = iy - p;
                            for kx in 0..kw {
                                let ix = ox + kx;
                                if ix < p || ix >= w + p {
                                    continue;
                                }
                                let ix = ix - p;
                                acc += in_data[in_plane + iy * w + ix] * w_data[w_plane + ky * kw + kx];
                            }
                        }
                    }
                    out_data[((b * out_c + oc) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients with respect to the input and the
/// layer parameters, given the upstream gradient at the output.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let (n, c_in, h, w) = input.dims4()?;
    let (out_c, _, kh, kw) = params.weights.dims4()?;
    let p = params.padding;
    let (h_out, w_out) = out_extent(h, w, kh, kw, p)?;
    let (gn, goc, gh, gw) = grad_out.dims4()?;
    if (gn, goc, gh, gw) != (n, out_c, h_out, w_out) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} does not match output shape [{}, {}, {}, {}]",
                grad_out.shape(),
                n,
                out_c,
                h_out,
                w_out
            ),
        ));
    }

    let mut grad_in = Tensor::zeros(vec![n, c_in, h, w])?;
    let mut grad_w = Tensor::zeros(params.weights.shape().to_vec())?;
    let mut grad_b = vec![T::zero(); out_c];

    let in_data = input.data();
    let w_data = params.weights.data();
    let go_data = grad_out.data();
    let gi_data = grad_in.data_mut();
    let gw_data = grad_w.data_mut();
    for b in 0..n {
        for oc in 0..out_c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let g = go_data[((b * out_c + oc) * h_out + oy) * w_out + ox];
                    if g == T::zero() {
                        continue;
                    }
                    grad_b[oc] += g;
                    for ic in 0..c_in {
                        let in_plane = ((b * c_in + ic) * h) * w;
                        let w_plane = ((oc * c_in + ic) * kh) * kw;
                        for ky in 0..kh {
                            let iy = oy + ky;
                            if iy < p || iy >= h + p {
                                continue;
                            }
                            let iy = iy - p;
                            for kx in 0..kw {
                                let ix = ox + kx;
                                if ix < p || ix >= w + p {
                                    continue;
                                }
                                let ix = ix - p;
                                gi_data[in_plane + iy * w + ix] += g * w_data[w_plane + ky * kw + kx];
                                gw_data[w_plane + ky * kw + kx] += g * in_data[in_plane + iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, ConvGrads { weights: grad_w, bias: grad_b }))
}

fn out_extent(h: usize, w: usize, kh: usize, kw: usize, p: usize) -> Result<(usize, usize)> {
    let h_span = h + 2 * p;
    let w_span = w + 2 * p;
    if kh > h_span || kw > w_span {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h_span, w_span),
        ));
    }
    Ok((h_span - kh + 1, w_span - kw + 1))
}
