use crate::error::Result;
use crate::tensor::{ensure_same_shape, Real, Tensor};

/// Which axis group a pooling operation collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Collapse the channel axis: `(N, C, H, W)` to `(N, 1, H, W)`.
    Channel,
    /// Collapse both spatial axes: `(N, C, H, W)` to `(N, C, 1, 1)`.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Global pooling over the chosen axis group.
///
/// Max pooling breaks ties toward the smallest index along the collapsed
/// axis group, which keeps the backward pass deterministic.
pub fn pool<T: Real>(input: &Tensor<T>, axis: PoolAxis, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    match axis {
        PoolAxis::Channel => {
            let mut out = Tensor::zeros(vec![n, 1, h, w])?;
            let data = input.data();
            let out_data = out.data_mut();
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let v = reduce(kind, c, |ch| data[((b * c + ch) * h + y) * w + x]);
                        out_data[(b * h + y) * w + x] = v;
                    }
                }
            }
            Ok(out)
        }
        PoolAxis::Spatial => {
            let mut out = Tensor::zeros(vec![n, c, 1, 1])?;
            let data = input.data();
            let out_data = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let plane = ((b * c + ch) * h) * w;
                    let v = reduce(kind, h * w, |i| data[plane + i]);
                    out_data[b * c + ch] = v;
                }
            }
            Ok(out)
        }
    }
}

fn reduce<T: Real>(kind: PoolKind, len: usize, get: impl Fn(usize) -> T) -> T {
    match kind {
        // The average accumulates in value-sorted order, so the result is
        // bit-identical under any rearrangement of the pooled positions.
        PoolKind::Avg => {
            let mut vals: Vec<T> = (0..len).map(get).collect();
            vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let mut acc = T::zero();
            for v in vals {
                acc += v;
            }
            acc / T::from_usize(len)
        }
        PoolKind::Max => {
            let mut best = get(0);
            for i in 1..len {
                let v = get(i);
                if v > best {
                    best = v;
                }
            }
            best
        }
    }
}

fn argmax<T: Real>(len: usize, get: impl Fn(usize) -> T) -> usize {
    let mut best = 0usize;
    let mut best_v = get(0);
    for i in 1..len {
        let v = get(i);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Backward pass of [`pool`]. Average pooling spreads the upstream gradient
/// uniformly; max pooling routes it to the winning element, recomputing the
/// argmax with the same lowest-index tie break as the forward pass.
pub fn pool_backward<T: Real>(
    input: &Tensor<T>,
    axis: PoolAxis,
    kind: PoolKind,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let expected = pool(input, axis, kind)?;
    ensure_same_shape("pool_backward", &expected, grad_out)?;

    let mut grad_in = Tensor::zeros(vec![n, c, h, w])?;
    let data = input.data();
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    match axis {
        PoolAxis::Channel => {
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let g = go[(b * h + y) * w + x];
                        match kind {
                            PoolKind::Avg => {
                                let share = g / T::from_usize(c);
                                for ch in 0..c {
                                    gi[((b * c + ch) * h + y) * w + x] += share;
                                }
                            }
                            PoolKind::Max => {
                                let ch = argmax(c, |ch| data[((b * c + ch) * h + y) * w + x]);
                                gi[((b * c + ch) * h + y) * w + x] += g;
                            }
                        }
                    }
                }
            }
        }
        PoolAxis::Spatial => {
            for b in 0..n {
                for ch in 0..c {
                    let plane = ((b * c + ch) * h) * w;
                    let g = go[b * c + ch];
                    match kind {
                        PoolKind::Avg => {
                            let share = g / T::from_usize(h * w);
                            for i in 0..h * w {
                                gi[plane + i] += share;
                            }
                        }
                        PoolKind::Max => {
                            let i = argmax(h * w, |i| data[plane + i]);
                            gi[plane + i] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
