//! Finite-difference verification of every backward pass in the crate.
//!
//! Each target draws a random base point (inputs and parameters), evaluates
//! a scalar projection of the target's output, and compares the analytic
//! gradient against central differences, all in 64-bit. The comparison is
//! the relative L2 error over the whole gradient vector.
//!
//! Rectifier and max-pool targets are piecewise linear; a base point with a
//! pre-activation or a pool winner margin inside [`KINK_MARGIN`] could be
//! crossed by the probe step, so such draws are rejected and redrawn. The
//! probe shifts any intermediate value by at most a few times [`FD_STEP`],
//! which keeps accepted base points strictly on one side of every kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::assembly::{
    assemble, assemble_backward, roi_align, roi_align_backward, upscale_coefficients,
    upscale_coefficients_backward, BoundingBox,
};
use crate::attention::{
    Arrangement, ChannelAttention, ChannelGrads, ChannelTrace, DualAttention, DualGrads,
    DualTrace, SpatialAttention, SpatialGrads, SpatialTrace,
};
use crate::decoder::{BasesDecoder, DecoderGrads};
use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::losses::{
    bce_mask_loss, bce_mask_loss_backward, point_loss, point_loss_backward, semantic_loss,
    semantic_loss_backward,
};
use crate::metrics::BinaryMask;
use crate::refine::{sample_points_train, PointPredictor, RefineConfig};
use crate::tensor::{
    add, add_backward, broadcast_add, broadcast_add_backward, broadcast_mul,
    broadcast_mul_backward, concat_channels, concat_channels_backward, conv2d, conv2d_backward,
    mul, mul_backward, pool, pool_backward, relu_neg_slope, relu_neg_slope_backward,
    resize_bilinear, resize_bilinear_backward, sample_points_bilinear,
    sample_points_bilinear_backward, sigmoid, sigmoid_backward, ConvGrads, ConvParams, PoolAxis,
    PoolKind, Tensor,
};

/// Probe step of the central difference.
pub const FD_STEP: f64 = 1e-6;
/// Largest acceptable relative L2 error between analytic and numeric
/// gradients.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Base points whose smallest kink distance falls below this are redrawn.
const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: u64 = 16;

type T64 = Tensor<f64>;

/// One verified target.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    /// Worst relative L2 error seen across all requested seeds.
    pub max_rel_err: f64,
    /// Differentiated coordinates per seed (inputs plus parameters).
    pub coords: usize,
}

struct Problem {
    theta: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> f64>,
    grad: Box<dyn Fn(&[f64]) -> Vec<f64>>,
    margin: Box<dyn Fn(&[f64]) -> f64>,
}

/// Flattens a fixed list of tensors into one coordinate vector and back.
#[derive(Clone)]
struct Packer {
    shapes: Vec<Vec<usize>>,
}

fn pack(tensors: &[T64]) -> (Vec<f64>, Packer) {
    let mut theta = Vec::new();
    let mut shapes = Vec::with_capacity(tensors.len());
    for t in tensors {
        theta.extend_from_slice(t.data());
        shapes.push(t.shape().to_vec());
    }
    (theta, Packer { shapes })
}

impl Packer {
    fn unpack(&self, theta: &[f64]) -> Vec<T64> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            out.push(
                Tensor::new(shape.clone(), theta[offset..offset + n].to_vec())
                    .expect("packer shapes are valid"),
            );
            offset += n;
        }
        debug_assert_eq!(offset, theta.len());
        out
    }
}

fn flatten(tensors: &[T64]) -> Vec<f64> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi)).expect("valid shape")
}

fn bias_tensor(b: &[f64]) -> T64 {
    Tensor::new(vec![b.len()], b.to_vec()).expect("bias is non-empty")
}

fn conv_tensors(p: &ConvParams<f64>) -> Vec<T64> {
    vec![p.weights.clone(), bias_tensor(&p.bias)]
}

fn conv_from(it: &mut impl Iterator<Item = T64>, template: &ConvParams<f64>) -> ConvParams<f64> {
    let weights = it.next().expect("conv weights");
    let bias = it.next().expect("conv bias").into_data();
    ConvParams { weights, bias, stride: template.stride, padding: template.padding }
}

fn conv_grad_tensors(g: &ConvGrads<f64>) -> Vec<T64> {
    vec![g.weights.clone(), bias_tensor(&g.bias)]
}

fn spatial_tensors(m: &SpatialAttention<f64>) -> Vec<T64> {
    [&m.global1, &m.global2, &m.local1, &m.local2]
        .iter()
        .flat_map(|p| conv_tensors(p))
        .collect()
}

fn spatial_from(
    it: &mut impl Iterator<Item = T64>,
    template: &SpatialAttention<f64>,
) -> SpatialAttention<f64> {
    SpatialAttention {
        global1: conv_from(it, &template.global1),
        global2: conv_from(it, &template.global2),
        local1: conv_from(it, &template.local1),
        local2: conv_from(it, &template.local2),
    }
}

fn spatial_grad_tensors(g: &SpatialGrads<f64>) -> Vec<T64> {
    [&g.global1, &g.global2, &g.local1, &g.local2]
        .iter()
        .flat_map(|c| conv_grad_tensors(c))
        .collect()
}

fn channel_tensors(m: &ChannelAttention<f64>) -> Vec<T64> {
    [&m.shared1, &m.shared2, &m.local1, &m.local2]
        .iter()
        .flat_map(|p| conv_tensors(p))
        .collect()
}

fn channel_from(
    it: &mut impl Iterator<Item = T64>,
    template: &ChannelAttention<f64>,
) -> ChannelAttention<f64> {
    ChannelAttention {
        shared1: conv_from(it, &template.shared1),
        shared2: conv_from(it, &template.shared2),
        local1: conv_from(it, &template.local1),
        local2: conv_from(it, &template.local2),
    }
}

fn channel_grad_tensors(g: &ChannelGrads<f64>) -> Vec<T64> {
    [&g.shared1, &g.shared2, &g.local1, &g.local2]
        .iter()
        .flat_map(|c| conv_grad_tensors(c))
        .collect()
}

fn dual_tensors(m: &DualAttention<f64>) -> Vec<T64> {
    let mut v = spatial_tensors(&m.spatial);
    v.extend(channel_tensors(&m.channel));
    v
}

fn dual_from(it: &mut impl Iterator<Item = T64>, template: &DualAttention<f64>) -> DualAttention<f64> {
    DualAttention {
        spatial: spatial_from(it, &template.spatial),
        channel: channel_from(it, &template.channel),
        arrangement: template.arrangement,
    }
}

fn dual_grad_tensors(g: &DualGrads<f64>) -> Vec<T64> {
    let mut v = spatial_grad_tensors(&g.spatial);
    v.extend(channel_grad_tensors(&g.channel));
    v
}

fn decoder_tensors(d: &BasesDecoder<f64>) -> Vec<T64> {
    let mut v: Vec<T64> = d.stack.iter().flat_map(conv_tensors).collect();
    v.extend(dual_tensors(&d.attention));
    v.extend(conv_tensors(&d.projection));
    v
}

fn decoder_from(it: &mut impl Iterator<Item = T64>, template: &BasesDecoder<f64>) -> BasesDecoder<f64> {
    BasesDecoder {
        stack: template.stack.iter().map(|c| conv_from(it, c)).collect(),
        attention: dual_from(it, &template.attention),
        projection: conv_from(it, &template.projection),
    }
}

fn decoder_grad_tensors(g: &DecoderGrads<f64>) -> Vec<T64> {
    let mut v: Vec<T64> = g.stack.iter().flat_map(conv_grad_tensors).collect();
    v.extend(dual_grad_tensors(&g.attention));
    v.extend(conv_grad_tensors(&g.projection));
    v
}

fn predictor_tensors(p: &PointPredictor<f64>) -> Vec<T64> {
    p.layers.iter().flat_map(conv_tensors).collect()
}

fn predictor_from(
    it: &mut impl Iterator<Item = T64>,
    template: &PointPredictor<f64>,
) -> PointPredictor<f64> {
    PointPredictor { layers: template.layers.iter().map(|c| conv_from(it, c)).collect() }
}

/// Replaces the zero biases of a freshly initialized module with small
/// random values. The production initializer pins biases at zero, which
/// parks rectifier pre-activations of fully zeroed pixels exactly on the
/// kink; random biases move the base point off it and exercise the bias
/// gradients at the same time.
fn randomize_bias(p: &mut ConvParams<f64>, rng: &mut ChaCha8Rng) {
    for b in &mut p.bias {
        *b = rng.gen_range(-0.3..0.3);
    }
}

fn randomize_spatial_biases(m: &mut SpatialAttention<f64>, rng: &mut ChaCha8Rng) {
    randomize_bias(&mut m.global1, rng);
    randomize_bias(&mut m.global2, rng);
    randomize_bias(&mut m.local1, rng);
    randomize_bias(&mut m.local2, rng);
}

fn randomize_channel_biases(m: &mut ChannelAttention<f64>, rng: &mut ChaCha8Rng) {
    randomize_bias(&mut m.shared1, rng);
    randomize_bias(&mut m.shared2, rng);
    randomize_bias(&mut m.local1, rng);
    randomize_bias(&mut m.local2, rng);
}

fn randomize_decoder_biases(d: &mut BasesDecoder<f64>, rng: &mut ChaCha8Rng) {
    for c in &mut d.stack {
        randomize_bias(c, rng);
    }
    randomize_spatial_biases(&mut d.attention.spatial, rng);
    randomize_channel_biases(&mut d.attention.channel, rng);
    randomize_bias(&mut d.projection, rng);
}

/// Smallest |value| in a tensor, the distance to the rectifier kink.
fn relu_margin(t: &T64) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Smallest gap between the winner and the runner-up of any max-pool group.
fn pool_gap(x: &T64, axis: PoolAxis) -> f64 {
    let (n, c, h, w) = x.dims4().expect("pool operand is rank 4");
    let mut min_gap = f64::INFINITY;
    let mut groups: Vec<Vec<f64>> = Vec::new();
    match axis {
        PoolAxis::Channel => {
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        groups.push((0..c).map(|ch| x.at4(b, ch, y, xx)).collect());
                    }
                }
            }
        }
        PoolAxis::Spatial => {
            for b in 0..n {
                for ch in 0..c {
                    groups.push(
                        (0..h * w).map(|i| x.at4(b, ch, i / w, i % w)).collect(),
                    );
                }
            }
        }
    }
    for g in groups {
        if g.len() < 2 {
            continue;
        }
        let mut top = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for v in g {
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        // A tie between two exact zeros is a tie between rectifier outputs
        // pinned at zero; the rectifier margin already keeps them there, so
        // the winner cannot change under the probe.
        if top == 0.0 && second == 0.0 {
            continue;
        }
        min_gap = min_gap.min(top - second);
    }
    min_gap
}

fn spatial_trace_margin(t: &SpatialTrace<f64>) -> f64 {
    relu_margin(&t.global_mlp.pre).min(relu_margin(&t.local_mlp.pre))
}

fn channel_trace_margin(t: &ChannelTrace<f64>) -> f64 {
    relu_margin(&t.shared_avg.pre)
        .min(relu_margin(&t.shared_max.pre))
        .min(relu_margin(&t.local_mlp.pre))
}

/// Kink margin of one dual-attention application on input `x`.
fn dual_trace_margin(trace: &DualTrace<f64>, x: &T64) -> f64 {
    match trace {
        DualTrace::SpatialChannel { sp_trace, mid, ch_trace, .. } => spatial_trace_margin(sp_trace)
            .min(pool_gap(x, PoolAxis::Channel))
            .min(channel_trace_margin(ch_trace))
            .min(pool_gap(mid, PoolAxis::Spatial)),
        DualTrace::ChannelSpatial { ch_trace, mid, sp_trace, .. } => channel_trace_margin(ch_trace)
            .min(pool_gap(x, PoolAxis::Spatial))
            .min(spatial_trace_margin(sp_trace))
            .min(pool_gap(mid, PoolAxis::Channel)),
        DualTrace::Parallel { sp_trace, ch_trace, .. } => spatial_trace_margin(sp_trace)
            .min(pool_gap(x, PoolAxis::Channel))
            .min(channel_trace_margin(ch_trace))
            .min(pool_gap(x, PoolAxis::Spatial)),
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative L2 error between two gradient vectors, floored to keep an
/// all-zero pair well defined.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(analytic).max(l2(numeric)).max(1e-8)
}

fn finite_difference(eval: &dyn Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let mut t = theta.to_vec();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = t[i];
        t[i] = orig + FD_STEP;
        let fp = eval(&t);
        t[i] = orig - FD_STEP;
        let fm = eval(&t);
        t[i] = orig;
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    out
}

/// Scalar projection with fixed random weights, so vector-valued targets
/// reduce to one number without hiding any output coordinate.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    rand_tensor(rng, shape, -1.0, 1.0)
}

fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_problem(name: &str, builder: &dyn Fn(u64) -> Problem, seed: u64) -> Result<(f64, usize)> {
    for attempt in 0..MAX_REDRAWS {
        let derived = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt);
        let p = builder(derived);
        if (p.margin)(&p.theta) <= KINK_MARGIN {
            continue;
        }
        let analytic = (p.grad)(&p.theta);
        let numeric = finite_difference(p.eval.as_ref(), &p.theta);
        if analytic.len() != numeric.len() {
            return Err(Error::validation(
                "gradcheck",
                format!(
                    "gradient length {} does not match {} coordinates",
                    analytic.len(),
                    numeric.len()
                ),
            ));
        }
        return Ok((relative_error(&analytic, &numeric), p.theta.len()));
    }
    Err(Error::Config(format!(
        "{}: no kink-free base point found for seed {} after {} redraws",
        name, seed, MAX_REDRAWS
    )))
}

// Target builders. Each consumes one derived seed and fixes everything that
// is not differentiated (point coordinates, boxes, hard targets, projection
// weights) from that same seed.

fn t_conv2d_3x3(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let x = rand_tensor(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[2], -0.2, 0.2);
    let proj = projection(&mut rng, &[1, 2, 5, 5]);
    let (theta, packer) = pack(&[x, w, b]);
    let params_of = {
        let packer = packer.clone();
        move |theta: &[f64]| -> (T64, ConvParams<f64>) {
            let mut it = packer.unpack(theta).into_iter();
            let x = it.next().unwrap();
            let w = it.next().unwrap();
            let b = it.next().unwrap().into_data();
            (x, ConvParams::same(w, b).unwrap())
        }
    };
    let eval_params = params_of.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, p) = eval_params(th);
            dot(&conv2d(&x, &p).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, p) = params_of(th);
            let (gx, gp) = conv2d_backward(&x, &p, &proj).unwrap();
            flatten(&[gx, gp.weights, bias_tensor(&gp.bias)])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_conv2d_1x1(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 4, 1, 1], -0.7, 0.7);
    let b = rand_tensor(&mut rng, &[3], -0.2, 0.2);
    let proj = projection(&mut rng, &[2, 3, 3, 3]);
    let (theta, packer) = pack(&[x, w, b]);
    let params_of = {
        let packer = packer.clone();
        move |theta: &[f64]| -> (T64, ConvParams<f64>) {
            let mut it = packer.unpack(theta).into_iter();
            let x = it.next().unwrap();
            let w = it.next().unwrap();
            let b = it.next().unwrap().into_data();
            (x, ConvParams::same(w, b).unwrap())
        }
    };
    let eval_params = params_of.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, p) = eval_params(th);
            dot(&conv2d(&x, &p).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, p) = params_of(th);
            let (gx, gp) = conv2d_backward(&x, &p, &proj).unwrap();
            flatten(&[gx, gp.weights, bias_tensor(&gp.bias)])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn pool_problem(seed: u64, axis: PoolAxis, kind: PoolKind) -> Problem {
    let mut rng = seeded_rng(seed);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    let out_shape = pool(&x, axis, kind).unwrap().shape().to_vec();
    let proj = projection(&mut rng, &out_shape);
    let (theta, packer) = pack(&[x]);
    let unpack_x = {
        let packer = packer.clone();
        move |th: &[f64]| packer.unpack(th).pop().unwrap()
    };
    let eval_x = unpack_x.clone();
    let eval_proj = proj.clone();
    let margin_x = unpack_x.clone();
    Problem {
        theta,
        eval: Box::new(move |th| dot(&pool(&eval_x(th), axis, kind).unwrap(), &eval_proj)),
        grad: Box::new(move |th| {
            let x = unpack_x(th);
            flatten(&[pool_backward(&x, axis, kind, &proj).unwrap()])
        }),
        margin: Box::new(move |th| match kind {
            PoolKind::Avg => f64::INFINITY,
            PoolKind::Max => pool_gap(&margin_x(th), axis),
        }),
    }
}

fn t_pool_channel_avg(seed: u64) -> Problem {
    pool_problem(seed, PoolAxis::Channel, PoolKind::Avg)
}
fn t_pool_channel_max(seed: u64) -> Problem {
    pool_problem(seed, PoolAxis::Channel, PoolKind::Max)
}
fn t_pool_spatial_avg(seed: u64) -> Problem {
    pool_problem(seed, PoolAxis::Spatial, PoolKind::Avg)
}
fn t_pool_spatial_max(seed: u64) -> Problem {
    pool_problem(seed, PoolAxis::Spatial, PoolKind::Max)
}

fn unary_problem(
    seed: u64,
    shape: &[usize],
    lo: f64,
    hi: f64,
    fwd: impl Fn(&T64) -> T64 + 'static,
    bwd: impl Fn(&T64, &T64) -> T64 + 'static,
    margin: impl Fn(&T64) -> f64 + 'static,
) -> Problem {
    let mut rng = seeded_rng(seed);
    let x = rand_tensor(&mut rng, shape, lo, hi);
    let out_shape = fwd(&x).shape().to_vec();
    let proj = projection(&mut rng, &out_shape);
    let (theta, packer) = pack(&[x]);
    let unpack_x = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let eval_x = unpack_x.clone();
    let eval_proj = proj.clone();
    let grad_x = unpack_x.clone();
    Problem {
        theta,
        eval: Box::new(move |th| dot(&fwd(&eval_x(th)), &eval_proj)),
        grad: Box::new(move |th| flatten(&[bwd(&grad_x(th), &proj)])),
        margin: Box::new(move |th| margin(&unpack_x(th))),
    }
}

fn t_sigmoid(seed: u64) -> Problem {
    unary_problem(
        seed,
        &[2, 3, 2, 2],
        -3.0,
        3.0,
        sigmoid,
        |x, g| sigmoid_backward(x, g).unwrap(),
        |_| f64::INFINITY,
    )
}

fn t_relu(seed: u64) -> Problem {
    unary_problem(
        seed,
        &[2, 3, 3, 2],
        -1.0,
        1.0,
        |x| relu_neg_slope(x, 0.0),
        |x, g| relu_neg_slope_backward(x, 0.0, g).unwrap(),
        relu_margin,
    )
}

fn t_leaky_relu(seed: u64) -> Problem {
    unary_problem(
        seed,
        &[1, 4, 3, 3],
        -1.0,
        1.0,
        |x| relu_neg_slope(x, 0.35),
        |x, g| relu_neg_slope_backward(x, 0.35, g).unwrap(),
        relu_margin,
    )
}

fn binary_problem(
    seed: u64,
    shape_a: &[usize],
    shape_b: &[usize],
    fwd: impl Fn(&T64, &T64) -> T64 + 'static,
    bwd: impl Fn(&T64, &T64, &T64) -> (T64, T64) + 'static,
) -> Problem {
    let mut rng = seeded_rng(seed);
    let a = rand_tensor(&mut rng, shape_a, -1.0, 1.0);
    let b = rand_tensor(&mut rng, shape_b, -1.0, 1.0);
    let out_shape = fwd(&a, &b).shape().to_vec();
    let proj = projection(&mut rng, &out_shape);
    let (theta, packer) = pack(&[a, b]);
    let unpack2 = move |th: &[f64]| {
        let mut it = packer.unpack(th).into_iter();
        (it.next().unwrap(), it.next().unwrap())
    };
    let eval_un = unpack2.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (a, b) = eval_un(th);
            dot(&fwd(&a, &b), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (a, b) = unpack2(th);
            let (ga, gb) = bwd(&a, &b, &proj);
            flatten(&[ga, gb])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_add(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[2, 2, 3, 2],
        &[2, 2, 3, 2],
        |a, b| add(a, b).unwrap(),
        |_, _, g| add_backward(g),
    )
}

fn t_mul(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[2, 2, 3, 2],
        &[2, 2, 3, 2],
        |a, b| mul(a, b).unwrap(),
        |a, b, g| mul_backward(a, b, g).unwrap(),
    )
}

fn t_broadcast_add(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[2, 4, 3, 3],
        &[2, 4, 1, 1],
        |a, b| broadcast_add(a, b).unwrap(),
        |a, b, g| broadcast_add_backward(a, b, g).unwrap(),
    )
}

fn t_broadcast_mul(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[2, 4, 3, 3],
        &[2, 1, 3, 3],
        |a, b| broadcast_mul(a, b).unwrap(),
        |a, b, g| broadcast_mul_backward(a, b, g).unwrap(),
    )
}

fn t_concat_channels(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[1, 2, 3, 3],
        &[1, 3, 3, 3],
        |a, b| concat_channels(a, b).unwrap(),
        |_, _, g| concat_channels_backward(g, 2).unwrap(),
    )
}

fn resize_problem(seed: u64, from: [usize; 2], to: [usize; 2]) -> Problem {
    unary_problem(
        seed,
        &[1, 2, from[0], from[1]],
        -1.0,
        1.0,
        move |x| resize_bilinear(x, to[0], to[1]).unwrap(),
        |x, g| resize_bilinear_backward(x, g).unwrap(),
        |_| f64::INFINITY,
    )
}

fn t_resize_up(seed: u64) -> Problem {
    resize_problem(seed, [4, 5], [9, 7])
}

fn t_resize_down(seed: u64) -> Problem {
    resize_problem(seed, [6, 6], [4, 3])
}

fn t_sample_points(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let coords: Vec<(f64, f64)> = (0..7)
        .map(|_| (rng.gen_range(-0.4..4.4), rng.gen_range(-0.4..4.4)))
        .collect();
    let coords_eval = coords.clone();
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let proj = projection(&mut rng, &[1, 2, 7]);
    let (theta, packer) = pack(&[x]);
    let unpack_x = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_x = unpack_x.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            dot(&sample_points_bilinear(&unpack_x(th), &coords_eval).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let x = grad_x(th);
            flatten(&[sample_points_bilinear_backward(&x, &coords, &proj).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_roi_align(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let x1 = rng.gen_range(0.0..2.5);
    let y1 = rng.gen_range(0.0..2.5);
    let bx = BoundingBox::new(x1, y1, x1 + rng.gen_range(2.0..5.0), y1 + rng.gen_range(2.0..5.0), 1.0)
        .unwrap();
    let res = 4;
    let bases = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
    let proj = projection(&mut rng, &[2, res, res]);
    let (theta, packer) = pack(&[bases]);
    let unpack_x = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_x = unpack_x.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| dot(&roi_align(&unpack_x(th), &bx, res).unwrap(), &eval_proj)),
        grad: Box::new(move |th| {
            flatten(&[roi_align_backward(&grad_x(th), &bx, res, &proj).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_upscale_coefficients(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let c = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let proj = projection(&mut rng, &[2, 7, 7]);
    let (theta, packer) = pack(&[c]);
    let unpack_c = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_c = unpack_c.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| dot(&upscale_coefficients(&unpack_c(th), 7).unwrap(), &eval_proj)),
        grad: Box::new(move |th| {
            flatten(&[upscale_coefficients_backward(&grad_c(th), &proj).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_assemble(seed: u64) -> Problem {
    binary_problem(
        seed,
        &[3, 4, 4],
        &[3, 4, 4],
        |a, b| assemble(a, b).unwrap(),
        |a, b, g| assemble_backward(a, b, g).unwrap(),
    )
}

fn t_bce_mask(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let logits = rand_tensor(&mut rng, &[5, 6], -2.0, 2.0);
    let targets = Tensor::from_fn(vec![5, 6], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
    let targets_eval = targets.clone();
    let (theta, packer) = pack(&[logits]);
    let unpack_l = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_l = unpack_l.clone();
    Problem {
        theta,
        eval: Box::new(move |th| bce_mask_loss(&unpack_l(th), &targets_eval).unwrap()),
        grad: Box::new(move |th| {
            flatten(&[bce_mask_loss_backward(&grad_l(th), &targets, 1.0).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_semantic_loss(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let logits = rand_tensor(&mut rng, &[6, 6], -2.0, 2.0);
    let mask =
        BinaryMask::new(9, 9, (0..81).map(|_| rng.gen_bool(0.4)).collect()).unwrap();
    let mask_eval = mask.clone();
    let (theta, packer) = pack(&[logits]);
    let unpack_l = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_l = unpack_l.clone();
    Problem {
        theta,
        eval: Box::new(move |th| semantic_loss(&unpack_l(th), &mask_eval).unwrap()),
        grad: Box::new(move |th| {
            flatten(&[semantic_loss_backward(&grad_l(th), &mask, 1.0).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_point_bce_from_map(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let coords: Vec<(f64, f64)> =
        (0..9).map(|_| (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0))).collect();
    let coords_eval = coords.clone();
    let targets =
        Tensor::from_fn(vec![9], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
    let targets_eval = targets.clone();
    let logits = rand_tensor(&mut rng, &[6, 6], -2.0, 2.0);
    let (theta, packer) = pack(&[logits]);
    let unpack_l = move |th: &[f64]| packer.unpack(th).pop().unwrap();
    let grad_l = unpack_l.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let map = unpack_l(th);
            let as4 = map.with_shape(vec![1, 1, 6, 6]).unwrap();
            let pts = sample_points_bilinear(&as4, &coords_eval)
                .unwrap()
                .with_shape(vec![9])
                .unwrap();
            point_loss(&pts, &targets_eval).unwrap()
        }),
        grad: Box::new(move |th| {
            let map = grad_l(th);
            let as4 = map.with_shape(vec![1, 1, 6, 6]).unwrap();
            let pts = sample_points_bilinear(&as4, &coords).unwrap().with_shape(vec![9]).unwrap();
            let g_pts = point_loss_backward(&pts, &targets, 1.0).unwrap();
            let g_map =
                sample_points_bilinear_backward(&as4, &coords, &g_pts.with_shape(vec![1, 1, 9]).unwrap())
                    .unwrap();
            flatten(&[g_map.with_shape(vec![6, 6]).unwrap()])
        }),
        margin: Box::new(|_| f64::INFINITY),
    }
}

fn t_spatial_attention(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut module = SpatialAttention::<f64>::kaiming(5, 2, &mut rng).unwrap();
    randomize_spatial_biases(&mut module, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 5, 4, 4], -1.0, 1.0);
    let proj = projection(&mut rng, &[1, 1, 4, 4]);
    let mut parts = vec![x];
    parts.extend(spatial_tensors(&module));
    let (theta, packer) = pack(&parts);
    let template = module.clone();
    let unpack_all = move |th: &[f64]| -> (T64, SpatialAttention<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let x = it.next().unwrap();
        (x, spatial_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, m) = eval_un(th);
            dot(&m.attention_map(&x).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, m) = grad_un(th);
            let (_, trace) = m.attention_map_trace(&x).unwrap();
            let (gx, grads) = m.attention_map_backward(&x, &trace, &proj).unwrap();
            let mut out = vec![gx];
            out.extend(spatial_grad_tensors(&grads));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (x, m) = unpack_all(th);
            let (_, trace) = m.attention_map_trace(&x).unwrap();
            spatial_trace_margin(&trace).min(pool_gap(&x, PoolAxis::Channel))
        }),
    }
}

fn t_channel_attention(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut module = ChannelAttention::<f64>::kaiming(5, 2, &mut rng).unwrap();
    randomize_channel_biases(&mut module, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 5, 3, 4], -1.0, 1.0);
    let proj = projection(&mut rng, &[1, 5, 3, 4]);
    let mut parts = vec![x];
    parts.extend(channel_tensors(&module));
    let (theta, packer) = pack(&parts);
    let template = module.clone();
    let unpack_all = move |th: &[f64]| -> (T64, ChannelAttention<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let x = it.next().unwrap();
        (x, channel_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, m) = eval_un(th);
            dot(&m.attention_map(&x).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, m) = grad_un(th);
            let (_, trace) = m.attention_map_trace(&x).unwrap();
            let (gx, grads) = m.attention_map_backward(&x, &trace, &proj).unwrap();
            let mut out = vec![gx];
            out.extend(channel_grad_tensors(&grads));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (x, m) = unpack_all(th);
            let (_, trace) = m.attention_map_trace(&x).unwrap();
            channel_trace_margin(&trace).min(pool_gap(&x, PoolAxis::Spatial))
        }),
    }
}

fn dual_problem(seed: u64, arrangement: Arrangement) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut module = DualAttention::<f64>::kaiming(4, 2, arrangement, &mut rng).unwrap();
    randomize_spatial_biases(&mut module.spatial, &mut rng);
    randomize_channel_biases(&mut module.channel, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 4, 4, 3], -1.0, 1.0);
    let proj = projection(&mut rng, &[1, 4, 4, 3]);
    let mut parts = vec![x];
    parts.extend(dual_tensors(&module));
    let (theta, packer) = pack(&parts);
    let template = module.clone();
    let unpack_all = move |th: &[f64]| -> (T64, DualAttention<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let x = it.next().unwrap();
        (x, dual_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, m) = eval_un(th);
            dot(&m.apply(&x).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, m) = grad_un(th);
            let (_, trace) = m.apply_trace(&x).unwrap();
            let (gx, grads) = m.apply_backward(&x, &trace, &proj).unwrap();
            let mut out = vec![gx];
            out.extend(dual_grad_tensors(&grads));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (x, m) = unpack_all(th);
            let (_, trace) = m.apply_trace(&x).unwrap();
            dual_trace_margin(&trace, &x)
        }),
    }
}

fn t_dual_spatial_channel(seed: u64) -> Problem {
    dual_problem(seed, Arrangement::SpatialChannel)
}
fn t_dual_channel_spatial(seed: u64) -> Problem {
    dual_problem(seed, Arrangement::ChannelSpatial)
}
fn t_dual_parallel(seed: u64) -> Problem {
    dual_problem(seed, Arrangement::Parallel)
}
fn t_dual_parallel_shared(seed: u64) -> Problem {
    dual_problem(seed, Arrangement::ParallelShared)
}

fn t_bases_decoder(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut dec =
        BasesDecoder::<f64>::kaiming(3, 4, 1, 2, 2, Arrangement::SpatialChannel, &mut rng).unwrap();
    randomize_decoder_biases(&mut dec, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    let proj = projection(&mut rng, &[1, 2, 10, 10]);
    let mut parts = vec![x];
    parts.extend(decoder_tensors(&dec));
    let (theta, packer) = pack(&parts);
    let template = dec.clone();
    let unpack_all = move |th: &[f64]| -> (T64, BasesDecoder<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let x = it.next().unwrap();
        (x, decoder_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, d) = eval_un(th);
            dot(&d.forward(&x).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (x, d) = grad_un(th);
            let (_, trace) = d.forward_trace(&x).unwrap();
            let (gx, grads) = d.backward(&trace, &proj, None).unwrap();
            let mut out = vec![gx];
            out.extend(decoder_grad_tensors(&grads));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (x, d) = unpack_all(th);
            let (_, trace) = d.forward_trace(&x).unwrap();
            let mut m = dual_trace_margin(&trace.att_trace, &trace.attention_input);
            for step in &trace.steps {
                m = m.min(relu_margin(&step.pre));
            }
            m
        }),
    }
}

fn t_point_predictor(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut head = PointPredictor::<f64>::kaiming(3, 4, 3, &mut rng).unwrap();
    for layer in &mut head.layers {
        randomize_bias(layer, &mut rng);
    }
    let fine = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    let coarse = rand_tensor(&mut rng, &[6], -1.5, 1.5);
    let proj = projection(&mut rng, &[6]);
    let mut parts = vec![fine, coarse];
    parts.extend(predictor_tensors(&head));
    let (theta, packer) = pack(&parts);
    let template = head.clone();
    let unpack_all = move |th: &[f64]| -> (T64, T64, PointPredictor<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let fine = it.next().unwrap();
        let coarse = it.next().unwrap();
        (fine, coarse, predictor_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_proj = proj.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (fine, coarse, head) = eval_un(th);
            dot(&head.predict(&fine, &coarse).unwrap(), &eval_proj)
        }),
        grad: Box::new(move |th| {
            let (fine, coarse, head) = grad_un(th);
            let (_, trace) = head.predict_trace(&fine, &coarse).unwrap();
            let (layer_grads, g_fine, g_coarse) = head.predict_backward(&trace, &proj).unwrap();
            let mut out = vec![g_fine, g_coarse];
            out.extend(layer_grads.iter().flat_map(conv_grad_tensors));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (fine, coarse, head) = unpack_all(th);
            let (_, trace) = head.predict_trace(&fine, &coarse).unwrap();
            trace.pres.iter().map(relu_margin).fold(f64::INFINITY, f64::min)
        }),
    }
}

fn t_refine_train_path(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut head = PointPredictor::<f64>::kaiming(2, 4, 3, &mut rng).unwrap();
    for layer in &mut head.layers {
        randomize_bias(layer, &mut rng);
    }
    let coarse_map = rand_tensor(&mut rng, &[6, 6], -1.5, 1.5);
    let features = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
    let cfg = RefineConfig { num_points: 8, ..RefineConfig::default() };
    // The sampled locations are constants of this target; only the values
    // read through them are differentiated.
    let pts = sample_points_train(&coarse_map, &cfg, seed).unwrap();
    let grid_coords: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
    let feat_coords: Vec<(f64, f64)> = grid_coords
        .iter()
        .map(|&(x, y)| ((x + 0.5) * (8.0 / 6.0) - 0.5, (y + 0.5) * (8.0 / 6.0) - 0.5))
        .collect();
    let targets = Tensor::from_fn(vec![8], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();

    let mut parts = vec![coarse_map, features];
    parts.extend(predictor_tensors(&head));
    let (theta, packer) = pack(&parts);
    let template = head.clone();
    let unpack_all = move |th: &[f64]| -> (T64, T64, PointPredictor<f64>) {
        let mut it = packer.unpack(th).into_iter();
        let c = it.next().unwrap();
        let f = it.next().unwrap();
        (c, f, predictor_from(&mut it, &template))
    };
    let run = {
        let grid_coords = grid_coords.clone();
        let feat_coords = feat_coords.clone();
        move |coarse_map: &T64, features: &T64, _head: &PointPredictor<f64>| {
            let c4 = coarse_map.with_shape(vec![1, 1, 6, 6]).unwrap();
            let coarse_vals = sample_points_bilinear(&c4, &grid_coords)
                .unwrap()
                .with_shape(vec![grid_coords.len()])
                .unwrap();
            let f4 = features.with_shape(vec![1, 2, 8, 8]).unwrap();
            let fine = sample_points_bilinear(&f4, &feat_coords)
                .unwrap()
                .with_shape(vec![2, feat_coords.len()])
                .unwrap();
            (coarse_vals, fine)
        }
    };
    let eval_un = unpack_all.clone();
    let eval_run = run.clone();
    let eval_targets = targets.clone();
    let grad_un = unpack_all.clone();
    let grad_run = run.clone();
    let margin_un = unpack_all.clone();
    let margin_run = run.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (c, f, head) = eval_un(th);
            let (coarse_vals, fine) = eval_run(&c, &f, &head);
            let logits = head.predict(&fine, &coarse_vals).unwrap();
            point_loss(&logits, &eval_targets).unwrap()
        }),
        grad: Box::new(move |th| {
            let (c, f, head) = grad_un(th);
            let (coarse_vals, fine) = grad_run(&c, &f, &head);
            let (logits, trace) = head.predict_trace(&fine, &coarse_vals).unwrap();
            let g_logits = point_loss_backward(&logits, &targets, 1.0).unwrap();
            let (layer_grads, g_fine, g_coarse_vals) =
                head.predict_backward(&trace, &g_logits).unwrap();
            let c4 = c.with_shape(vec![1, 1, 6, 6]).unwrap();
            let g_c = sample_points_bilinear_backward(
                &c4,
                &grid_coords,
                &g_coarse_vals.with_shape(vec![1, 1, grid_coords.len()]).unwrap(),
            )
            .unwrap()
            .with_shape(vec![6, 6])
            .unwrap();
            let f4 = f.with_shape(vec![1, 2, 8, 8]).unwrap();
            let g_f = sample_points_bilinear_backward(
                &f4,
                &feat_coords,
                &g_fine.with_shape(vec![1, 2, feat_coords.len()]).unwrap(),
            )
            .unwrap()
            .with_shape(vec![2, 8, 8])
            .unwrap();
            let mut out = vec![g_c, g_f];
            out.extend(layer_grads.iter().flat_map(conv_grad_tensors));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (c, f, head) = margin_un(th);
            let (coarse_vals, fine) = margin_run(&c, &f, &head);
            let (_, trace) = head.predict_trace(&fine, &coarse_vals).unwrap();
            trace.pres.iter().map(relu_margin).fold(f64::INFINITY, f64::min)
        }),
    }
}

fn t_mask_branch_chain(seed: u64) -> Problem {
    let mut rng = seeded_rng(seed);
    let mut dec =
        BasesDecoder::<f64>::kaiming(3, 4, 1, 2, 2, Arrangement::SpatialChannel, &mut rng).unwrap();
    randomize_decoder_biases(&mut dec, &mut rng);
    let sem_w = rand_tensor(&mut rng, &[1, 4, 1, 1], -0.7, 0.7);
    let sem_b = rand_tensor(&mut rng, &[1], -0.2, 0.2);
    let x = rand_tensor(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
    let coeffs = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let bx = BoundingBox::new(1.0, 2.0, 9.5, 10.0, 1.0).unwrap();
    let res = 8;
    let mask_targets =
        Tensor::from_fn(vec![res, res], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
    let sem_mask = BinaryMask::new(9, 9, (0..81).map(|_| rng.gen_bool(0.4)).collect()).unwrap();

    let mut parts = vec![x, coeffs, sem_w, sem_b];
    parts.extend(decoder_tensors(&dec));
    let (theta, packer) = pack(&parts);
    let template = dec.clone();
    type Unpacked = (T64, T64, ConvParams<f64>, BasesDecoder<f64>);
    let unpack_all = move |th: &[f64]| -> Unpacked {
        let mut it = packer.unpack(th).into_iter();
        let x = it.next().unwrap();
        let coeffs = it.next().unwrap();
        let sem_w = it.next().unwrap();
        let sem_b = it.next().unwrap().into_data();
        let sem = ConvParams::same(sem_w, sem_b).unwrap();
        (x, coeffs, sem, decoder_from(&mut it, &template))
    };
    let eval_un = unpack_all.clone();
    let grad_un = unpack_all.clone();
    let eval_mask_targets = mask_targets.clone();
    let eval_sem_mask = sem_mask.clone();
    Problem {
        theta,
        eval: Box::new(move |th| {
            let (x, coeffs, sem, dec) = eval_un(th);
            let (bases, trace) = dec.forward_trace(&x).unwrap();
            let bases3 = bases.with_shape(vec![2, 12, 12]).unwrap();
            let crops = roi_align(&bases3, &bx, res).unwrap();
            let up = upscale_coefficients(&coeffs, res).unwrap();
            let logits = assemble(&crops, &up).unwrap();
            let mask_l = bce_mask_loss(&logits, &eval_mask_targets).unwrap();
            let sem_logits = conv2d(trace.attended(), &sem).unwrap();
            let sem_2d = sem_logits.with_shape(vec![6, 6]).unwrap();
            let sem_l = semantic_loss(&sem_2d, &eval_sem_mask).unwrap();
            mask_l + 0.3 * sem_l
        }),
        grad: Box::new(move |th| {
            let (x, coeffs, sem, dec) = grad_un(th);
            let (bases, trace) = dec.forward_trace(&x).unwrap();
            let bases3 = bases.with_shape(vec![2, 12, 12]).unwrap();
            let crops = roi_align(&bases3, &bx, res).unwrap();
            let up = upscale_coefficients(&coeffs, res).unwrap();
            let logits = assemble(&crops, &up).unwrap();
            let g_logits = bce_mask_loss_backward(&logits, &mask_targets, 1.0).unwrap();
            let (g_crops, g_up) = assemble_backward(&crops, &up, &g_logits).unwrap();
            let g_coeffs = upscale_coefficients_backward(&coeffs, &g_up).unwrap();
            let g_bases3 = roi_align_backward(&bases3, &bx, res, &g_crops).unwrap();
            let g_bases = g_bases3.with_shape(vec![1, 2, 12, 12]).unwrap();

            let sem_logits = conv2d(trace.attended(), &sem).unwrap();
            let sem_2d = sem_logits.with_shape(vec![6, 6]).unwrap();
            let g_sem_2d = semantic_loss_backward(&sem_2d, &sem_mask, 0.3).unwrap();
            let g_sem_logits = g_sem_2d.with_shape(vec![1, 1, 6, 6]).unwrap();
            let (g_attended, g_sem_conv) =
                conv2d_backward(trace.attended(), &sem, &g_sem_logits).unwrap();

            let (g_x, dec_grads) = dec.backward(&trace, &g_bases, Some(&g_attended)).unwrap();
            let mut out =
                vec![g_x, g_coeffs, g_sem_conv.weights.clone(), bias_tensor(&g_sem_conv.bias)];
            out.extend(decoder_grad_tensors(&dec_grads));
            flatten(&out)
        }),
        margin: Box::new(move |th| {
            let (x, _, _, dec) = unpack_all(th);
            let (_, trace) = dec.forward_trace(&x).unwrap();
            let mut m = dual_trace_margin(&trace.att_trace, &trace.attention_input);
            for step in &trace.steps {
                m = m.min(relu_margin(&step.pre));
            }
            m
        }),
    }
}

type BuilderFn = fn(u64) -> Problem;

const TARGETS: &[(&str, BuilderFn)] = &[
    ("conv2d_3x3", t_conv2d_3x3),
    ("conv2d_1x1", t_conv2d_1x1),
    ("pool_channel_avg", t_pool_channel_avg),
    ("pool_channel_max", t_pool_channel_max),
    ("pool_spatial_avg", t_pool_spatial_avg),
    ("pool_spatial_max", t_pool_spatial_max),
    ("sigmoid", t_sigmoid),
    ("relu", t_relu),
    ("leaky_relu", t_leaky_relu),
    ("add", t_add),
    ("mul", t_mul),
    ("broadcast_add", t_broadcast_add),
    ("broadcast_mul", t_broadcast_mul),
    ("concat_channels", t_concat_channels),
    ("resize_bilinear_up", t_resize_up),
    ("resize_bilinear_down", t_resize_down),
    ("sample_points_bilinear", t_sample_points),
    ("roi_align", t_roi_align),
    ("upscale_coefficients", t_upscale_coefficients),
    ("assemble", t_assemble),
    ("bce_mask_loss", t_bce_mask),
    ("semantic_loss", t_semantic_loss),
    ("point_bce_from_map", t_point_bce_from_map),
    ("spatial_attention", t_spatial_attention),
    ("channel_attention", t_channel_attention),
    ("dual_spatial_channel", t_dual_spatial_channel),
    ("dual_channel_spatial", t_dual_channel_spatial),
    ("dual_parallel", t_dual_parallel),
    ("dual_parallel_shared", t_dual_parallel_shared),
    ("bases_decoder", t_bases_decoder),
    ("point_predictor", t_point_predictor),
    ("refine_train_path", t_refine_train_path),
    ("mask_branch_chain", t_mask_branch_chain),
];

/// Names of every verified target, in run order.
pub fn target_names() -> Vec<&'static str> {
    TARGETS.iter().map(|(n, _)| *n).collect()
}

/// Runs every target over every seed and reports the worst relative error
/// per target.
pub fn run_all(seeds: &[u64]) -> Result<Vec<CheckReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut reports = Vec::with_capacity(TARGETS.len());
    for (name, builder) in TARGETS {
        let mut max_rel_err = 0.0f64;
        let mut coords = 0;
        for &seed in seeds {
            let (err, dim) = check_problem(name, &|s| builder(s), seed)?;
            max_rel_err = max_rel_err.max(err);
            coords = dim;
        }
        reports.push(CheckReport { name, max_rel_err, coords });
    }
    Ok(reports)
}
