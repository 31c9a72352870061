use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Real, Tensor};

/// Numerically stable logistic function, clamped into the open interval
/// (0, 1) so downstream logs and strict-range checks never see the closed
/// endpoints even in 32-bit.
pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("sigmoid_backward", input, grad_out)?;
    let mut grad = input.clone();
    for (g, (&x, &go)) in grad
        .data_mut()
        .iter_mut()
        .zip(input.data().iter().zip(grad_out.data().iter()))
    {
        let s = sigmoid_scalar(x);
        *g = go * s * (T::one() - s);
    }
    Ok(grad)
}

/// Rectifier with a configurable negative slope; slope 0 is plain ReLU,
/// slope 1 is the identity.
pub fn relu_neg_slope<T: Real>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    input.map(|x| if x > T::zero() { x } else { s * x })
}

/// At exactly zero the negative-slope branch is taken.
pub fn relu_neg_slope_backward<T: Real>(
    input: &Tensor<T>,
    slope: f64,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    ensure_same_shape("relu_neg_slope_backward", input, grad_out)?;
    let s = T::from_f64(slope);
    let mut grad = input.clone();
    for (g, (&x, &go)) in grad
        .data_mut()
        .iter_mut()
        .zip(input.data().iter().zip(grad_out.data().iter()))
    {
        *g = if x > T::zero() { go } else { go * s };
    }
    Ok(grad)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o += bv;
    }
    Ok(out)
}

pub fn add_backward<T: Real>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("mul", a, b)?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o *= bv;
    }
    Ok(out)
}

pub fn mul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_same_shape("mul_backward", a, grad_out)?;
    Ok((mul(grad_out, b)?, mul(grad_out, a)?))
}

pub fn scale<T: Real>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|x| x * factor)
}

fn broadcast_index(shape_a: &[usize], shape_b: &[usize], idx: &[usize; 4]) -> usize {
    let mut flat = 0usize;
    for axis in 0..4 {
        let i = if shape_b[axis] == 1 { 0 } else { idx[axis] };
        debug_assert!(shape_b[axis] == 1 || shape_b[axis] == shape_a[axis]);
        flat = flat * shape_b[axis] + i;
    }
    flat
}

fn check_broadcast<T: Real>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rank() != 4 || b.rank() != 4 {
        return Err(Error::shape(
            context,
            format!("broadcast requires rank-4 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    for axis in 0..4 {
        let (ea, eb) = (a.shape()[axis], b.shape()[axis]);
        if eb != 1 && eb != ea {
            return Err(Error::shape(
                context,
                format!("axis {}: extent {} cannot broadcast against {}", axis, eb, ea),
            ));
        }
    }
    Ok(())
}

fn broadcast_zip<T: Real>(
    context: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_broadcast(context, a, b)?;
    let (n, c, h, w) = a.dims4()?;
    let mut out = a.clone();
    let b_data = b.data();
    let out_data = out.data_mut();
    let mut flat = 0usize;
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let bi = broadcast_index(a.shape(), b.shape(), &[bn, ch, y, x]);
                    out_data[flat] = op(out_data[flat], b_data[bi]);
                    flat += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adds `b` onto `a`, expanding any axis of `b` whose extent is 1.
pub fn broadcast_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("broadcast_add", a, b, |x, y| x + y)
}

pub fn broadcast_add_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_broadcast("broadcast_add_backward", a, b)?;
    ensure_same_shape("broadcast_add_backward", a, grad_out)?;
    let grad_a = grad_out.clone();
    let mut grad_b = Tensor::zeros(b.shape().to_vec())?;
    scatter_reduce(a, b, grad_out, grad_b.data_mut(), |g, _, _| g)?;
    Ok((grad_a, grad_b))
}

/// Multiplies `a` by `b`, expanding any axis of `b` whose extent is 1.
pub fn broadcast_mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("broadcast_mul", a, b, |x, y| x * y)
}

pub fn broadcast_mul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_broadcast("broadcast_mul_backward", a, b)?;
    ensure_same_shape("broadcast_mul_backward", a, grad_out)?;
    let grad_a = broadcast_zip("broadcast_mul_backward", grad_out, b, |g, bv| g * bv)?;
    let mut grad_b = Tensor::zeros(b.shape().to_vec())?;
    scatter_reduce(a, b, grad_out, grad_b.data_mut(), |g, av, _| g * av)?;
    Ok((grad_a, grad_b))
}

/// Accumulates `f(grad, a, b)` into the broadcast source position of `b` for
/// every output coordinate; the summation realizes the reduction over
/// broadcast axes.
fn scatter_reduce<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    acc: &mut [T],
    f: impl Fn(T, T, T) -> T,
) -> Result<()> {
    let (n, c, h, w) = a.dims4()?;
    let a_data = a.data();
    let b_data = b.data();
    let go = grad_out.data();
    let mut flat = 0usize;
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let bi = broadcast_index(a.shape(), b.shape(), &[bn, ch, y, x]);
                    acc[bi] += f(go[flat], a_data[flat], b_data[bi]);
                    flat += 1;
                }
            }
        }
    }
    Ok(())
}

/// Stacks two maps along the channel axis: `(N, Ca, H, W)` and `(N, Cb, H, W)`
/// give `(N, Ca + Cb, H, W)` with `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (nb, hb, wb) != (n, h, w) {
        return Err(Error::shape(
            "concat_channels",
            format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(vec![n, ca + cb, h, w])?;
    let plane = h * w;
    let out_data = out.data_mut();
    for bn in 0..n {
        let dst = bn * (ca + cb) * plane;
        out_data[dst..dst + ca * plane]
            .copy_from_slice(&a.data()[bn * ca * plane..(bn + 1) * ca * plane]);
        out_data[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[bn * cb * plane..(bn + 1) * cb * plane]);
    }
    Ok(out)
}

/// Splits the upstream gradient of [`concat_channels`] back into the two
/// operand gradients; `ca` is the channel count of the first operand.
pub fn concat_channels_backward<T: Real>(
    grad_out: &Tensor<T>,
    ca: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if ca == 0 || ca >= c {
        return Err(Error::shape(
            "concat_channels_backward",
            format!("split point {} outside 1..{}", ca, c),
        ));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut ga = Tensor::zeros(vec![n, ca, h, w])?;
    let mut gb = Tensor::zeros(vec![n, cb, h, w])?;
    for bn in 0..n {
        let src = bn * c * plane;
        ga.data_mut()[bn * ca * plane..(bn + 1) * ca * plane]
            .copy_from_slice(&grad_out.data()[src..src + ca * plane]);
        gb.data_mut()[bn * cb * plane..(bn + 1) * cb * plane]
            .copy_from_slice(&grad_out.data()[src + ca * plane..src + c * plane]);
    }
    Ok((ga, gb))
}
