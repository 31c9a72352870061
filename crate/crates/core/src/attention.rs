//! Dual attention over feature maps: a spatial gate and a channel gate, each
//! blending a squeezed global branch with a pointwise local branch, combined
//! in one of four arrangements.
//!
//! Every gate is a sigmoid, so gated features are a strict contraction of
//! the input. With all parameters zero each gate is exactly one half
//! everywhere, which pins the whole module to `0.25 * x` regardless of
//! arrangement; arithmetic by powers of two keeps that identity exact in
//! both scalar types.

use crate::error::{Error, Result};
use crate::tensor::{
    add, broadcast_add, broadcast_add_backward, broadcast_mul, broadcast_mul_backward,
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, pool, pool_backward,
    relu_neg_slope, relu_neg_slope_backward, sigmoid, sigmoid_backward, ConvGrads, ConvParams,
    PoolAxis, PoolKind, Real, Tensor,
};
use crate::init::kaiming_conv;
use rand_chacha::ChaCha8Rng;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Two pointwise-or-spatial convolutions with a rectifier between them; the
/// shared building block of every attention branch.
#[derive(Debug, Clone)]
pub struct Mlp2Trace<T: Real> {
    pub(crate) pre: Tensor<T>,
    pub(crate) act: Tensor<T>,
}

fn mlp2_forward_trace<T: Real>(
    x: &Tensor<T>,
    c1: &ConvParams<T>,
    c2: &ConvParams<T>,
) -> Result<(Tensor<T>, Mlp2Trace<T>)> {
    let pre = conv2d(x, c1)?;
    let act = relu_neg_slope(&pre, 0.0);
    let out = conv2d(&act, c2)?;
    Ok((out, Mlp2Trace { pre, act }))
}

fn mlp2_backward<T: Real>(
    x: &Tensor<T>,
    c1: &ConvParams<T>,
    c2: &ConvParams<T>,
    trace: &Mlp2Trace<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>, ConvGrads<T>)> {
    let (g_act, g_c2) = conv2d_backward(&trace.act, c2, grad_out)?;
    let g_pre = relu_neg_slope_backward(&trace.pre, 0.0, &g_act)?;
    let (g_x, g_c1) = conv2d_backward(x, c1, &g_pre)?;
    Ok((g_x, g_c1, g_c2))
}

fn zero_grads_like<T: Real>(p: &ConvParams<T>) -> ConvGrads<T> {
    ConvGrads {
        weights: Tensor::zeros(p.weights.shape().to_vec()).expect("valid shape"),
        bias: vec![T::zero(); p.bias.len()],
    }
}

fn add_grads<T: Real>(a: &mut ConvGrads<T>, b: &ConvGrads<T>) {
    for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
        *x += *y;
    }
    for (x, y) in a.bias.iter_mut().zip(b.bias.iter()) {
        *x += *y;
    }
}

/// Where the attention gate places its emphasis spatially. The global branch
/// squeezes channels by average and max, stacks the two maps and runs a 3x3
/// bottleneck; the local branch is a per-pixel channel bottleneck.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T: Real> {
    pub global1: ConvParams<T>,
    pub global2: ConvParams<T>,
    pub local1: ConvParams<T>,
    pub local2: ConvParams<T>,
}

#[derive(Debug, Clone)]
pub struct SpatialTrace<T: Real> {
    pub(crate) cat: Tensor<T>,
    pub(crate) global_mlp: Mlp2Trace<T>,
    pub(crate) local_mlp: Mlp2Trace<T>,
    pub(crate) pre: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SpatialGrads<T: Real> {
    pub global1: ConvGrads<T>,
    pub global2: ConvGrads<T>,
    pub local1: ConvGrads<T>,
    pub local2: ConvGrads<T>,
}

impl<T: Real> SpatialAttention<T> {
    fn hidden_dims(channels: usize, reduction: usize) -> Result<(usize, usize)> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Config(format!(
                "attention needs channels >= 1 and reduction >= 1, got {} and {}",
                channels, reduction
            )));
        }
        Ok((ceil_div(4 * channels, reduction), ceil_div(channels, reduction)))
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let (gh, lh) = Self::hidden_dims(channels, reduction)?;
        Ok(SpatialAttention {
            global1: ConvParams::same(Tensor::zeros(vec![gh, 2, 3, 3])?, vec![T::zero(); gh])?,
            global2: ConvParams::same(Tensor::zeros(vec![1, gh, 3, 3])?, vec![T::zero()])?,
            local1: ConvParams::same(Tensor::zeros(vec![lh, channels, 1, 1])?, vec![T::zero(); lh])?,
            local2: ConvParams::same(Tensor::zeros(vec![1, lh, 1, 1])?, vec![T::zero()])?,
        })
    }

    pub fn kaiming(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (gh, lh) = Self::hidden_dims(channels, reduction)?;
        Ok(SpatialAttention {
            global1: kaiming_conv(gh, 2, 3, 1.0, rng)?,
            global2: kaiming_conv(1, gh, 3, 1.0, rng)?,
            local1: kaiming_conv(lh, channels, 1, 1.0, rng)?,
            local2: kaiming_conv(1, lh, 1, 1.0, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.local1.in_channels()
    }

    /// Gate values in `(0, 1)`, shaped `(N, 1, H, W)`.
    pub fn attention_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.attention_map_trace(x)?.0)
    }

    pub fn attention_map_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SpatialTrace<T>)> {
        let avg = pool(x, PoolAxis::Channel, PoolKind::Avg)?;
        let max = pool(x, PoolAxis::Channel, PoolKind::Max)?;
        let cat = concat_channels(&avg, &max)?;
        let (global_out, global_mlp) = mlp2_forward_trace(&cat, &self.global1, &self.global2)?;
        let (local_out, local_mlp) = mlp2_forward_trace(x, &self.local1, &self.local2)?;
        let pre = add(&global_out, &local_out)?;
        let att = sigmoid(&pre);
        Ok((att, SpatialTrace { cat, global_mlp, local_mlp, pre }))
    }

    pub fn attention_map_backward(
        &self,
        x: &Tensor<T>,
        trace: &SpatialTrace<T>,
        grad_att: &Tensor<T>,
    ) -> Result<(Tensor<T>, SpatialGrads<T>)> {
        let g_pre = sigmoid_backward(&trace.pre, grad_att)?;
        let (g_cat, g_global1, g_global2) =
            mlp2_backward(&trace.cat, &self.global1, &self.global2, &trace.global_mlp, &g_pre)?;
        let (g_avg, g_max) = concat_channels_backward(&g_cat, 1)?;
        let g_from_avg = pool_backward(x, PoolAxis::Channel, PoolKind::Avg, &g_avg)?;
        let g_from_max = pool_backward(x, PoolAxis::Channel, PoolKind::Max, &g_max)?;
        let (g_local, g_local1, g_local2) =
            mlp2_backward(x, &self.local1, &self.local2, &trace.local_mlp, &g_pre)?;
        let g_x = add(&add(&g_from_avg, &g_from_max)?, &g_local)?;
        Ok((
            g_x,
            SpatialGrads {
                global1: g_global1,
                global2: g_global2,
                local1: g_local1,
                local2: g_local2,
            },
        ))
    }
}

/// Per-channel gate. The global branch squeezes space by average and max
/// pooling and pushes both through one shared channel bottleneck; the local
/// branch applies a pointwise bottleneck at full resolution, so the gate
/// varies per position as well as per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Real> {
    pub shared1: ConvParams<T>,
    pub shared2: ConvParams<T>,
    pub local1: ConvParams<T>,
    pub local2: ConvParams<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelTrace<T: Real> {
    pub(crate) avg: Tensor<T>,
    pub(crate) max: Tensor<T>,
    pub(crate) shared_avg: Mlp2Trace<T>,
    pub(crate) shared_max: Mlp2Trace<T>,
    pub(crate) local_mlp: Mlp2Trace<T>,
    pub(crate) local_out: Tensor<T>,
    pub(crate) squeeze_sum: Tensor<T>,
    pub(crate) pre: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelGrads<T: Real> {
    pub shared1: ConvGrads<T>,
    pub shared2: ConvGrads<T>,
    pub local1: ConvGrads<T>,
    pub local2: ConvGrads<T>,
}

impl<T: Real> ChannelAttention<T> {
    fn hidden_dim(channels: usize, reduction: usize) -> Result<usize> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Config(format!(
                "attention needs channels >= 1 and reduction >= 1, got {} and {}",
                channels, reduction
            )));
        }
        Ok(ceil_div(channels, reduction))
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let h = Self::hidden_dim(channels, reduction)?;
        let bottleneck = |o: usize, i: usize| -> Result<ConvParams<T>> {
            ConvParams::same(Tensor::zeros(vec![o, i, 1, 1])?, vec![T::zero(); o])
        };
        Ok(ChannelAttention {
            shared1: bottleneck(h, channels)?,
            shared2: bottleneck(channels, h)?,
            local1: bottleneck(h, channels)?,
            local2: bottleneck(channels, h)?,
        })
    }

    pub fn kaiming(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = Self::hidden_dim(channels, reduction)?;
        Ok(ChannelAttention {
            shared1: kaiming_conv(h, channels, 1, 1.0, rng)?,
            shared2: kaiming_conv(channels, h, 1, 1.0, rng)?,
            local1: kaiming_conv(h, channels, 1, 1.0, rng)?,
            local2: kaiming_conv(channels, h, 1, 1.0, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.local1.in_channels()
    }

    /// Gate values in `(0, 1)`, shaped `(N, C, H, W)`.
    pub fn attention_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.attention_map_trace(x)?.0)
    }

    pub fn attention_map_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ChannelTrace<T>)> {
        let avg = pool(x, PoolAxis::Spatial, PoolKind::Avg)?;
        let max = pool(x, PoolAxis::Spatial, PoolKind::Max)?;
        let (sa, shared_avg) = mlp2_forward_trace(&avg, &self.shared1, &self.shared2)?;
        let (sm, shared_max) = mlp2_forward_trace(&max, &self.shared1, &self.shared2)?;
        let squeeze_sum = add(&sa, &sm)?;
        let (local_out, local_mlp) = mlp2_forward_trace(x, &self.local1, &self.local2)?;
        let pre = broadcast_add(&local_out, &squeeze_sum)?;
        let att = sigmoid(&pre);
        Ok((
            att,
            ChannelTrace { avg, max, shared_avg, shared_max, local_mlp, local_out, squeeze_sum, pre },
        ))
    }

    pub fn attention_map_backward(
        &self,
        x: &Tensor<T>,
        trace: &ChannelTrace<T>,
        grad_att: &Tensor<T>,
    ) -> Result<(Tensor<T>, ChannelGrads<T>)> {
        let g_pre = sigmoid_backward(&trace.pre, grad_att)?;
        let (g_local_out, g_squeeze) =
            broadcast_add_backward(&trace.local_out, &trace.squeeze_sum, &g_pre)?;
        let (g_avg_in, s1a, s2a) =
            mlp2_backward(&trace.avg, &self.shared1, &self.shared2, &trace.shared_avg, &g_squeeze)?;
        let (g_max_in, s1m, s2m) =
            mlp2_backward(&trace.max, &self.shared1, &self.shared2, &trace.shared_max, &g_squeeze)?;
        let mut g_shared1 = s1a;
        add_grads(&mut g_shared1, &s1m);
        let mut g_shared2 = s2a;
        add_grads(&mut g_shared2, &s2m);
        let g_from_avg = pool_backward(x, PoolAxis::Spatial, PoolKind::Avg, &g_avg_in)?;
        let g_from_max = pool_backward(x, PoolAxis::Spatial, PoolKind::Max, &g_max_in)?;
        let (g_local, g_local1, g_local2) =
            mlp2_backward(x, &self.local1, &self.local2, &trace.local_mlp, &g_local_out)?;
        let g_x = add(&add(&g_from_avg, &g_from_max)?, &g_local)?;
        Ok((
            g_x,
            ChannelGrads {
                shared1: g_shared1,
                shared2: g_shared2,
                local1: g_local1,
                local2: g_local2,
            },
        ))
    }
}

/// How the two gates compose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arrangement {
    /// Spatial gate first, channel gate on the spatially gated features.
    #[default]
    SpatialChannel,
    /// Channel gate first, spatial gate on the channel-gated features.
    ChannelSpatial,
    /// Both gates computed from the raw input, applied multiplicatively.
    Parallel,
    /// Like `Parallel`, but the channel gate's local branch reuses the
    /// spatial gate's first local convolution.
    ParallelShared,
}

#[derive(Debug, Clone)]
pub struct DualAttention<T: Real> {
    pub spatial: SpatialAttention<T>,
    pub channel: ChannelAttention<T>,
    pub arrangement: Arrangement,
}

#[derive(Debug, Clone)]
pub struct DualGrads<T: Real> {
    pub spatial: SpatialGrads<T>,
    pub channel: ChannelGrads<T>,
}

/// Intermediates of one [`DualAttention::apply_trace`] call.
#[derive(Debug, Clone)]
pub enum DualTrace<T: Real> {
    SpatialChannel {
        sp_att: Tensor<T>,
        sp_trace: SpatialTrace<T>,
        mid: Tensor<T>,
        ch_att: Tensor<T>,
        ch_trace: ChannelTrace<T>,
    },
    ChannelSpatial {
        ch_att: Tensor<T>,
        ch_trace: ChannelTrace<T>,
        mid: Tensor<T>,
        sp_att: Tensor<T>,
        sp_trace: SpatialTrace<T>,
    },
    Parallel {
        sp_att: Tensor<T>,
        sp_trace: SpatialTrace<T>,
        ch_att: Tensor<T>,
        ch_trace: ChannelTrace<T>,
        mid: Tensor<T>,
    },
}

impl<T: Real> DualAttention<T> {
    pub fn zeros(channels: usize, reduction: usize, arrangement: Arrangement) -> Result<Self> {
        Ok(DualAttention {
            spatial: SpatialAttention::zeros(channels, reduction)?,
            channel: ChannelAttention::zeros(channels, reduction)?,
            arrangement,
        })
    }

    pub fn kaiming(
        channels: usize,
        reduction: usize,
        arrangement: Arrangement,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(DualAttention {
            spatial: SpatialAttention::kaiming(channels, reduction, rng)?,
            channel: ChannelAttention::kaiming(channels, reduction, rng)?,
            arrangement,
        })
    }

    /// Channel gate with the local entry convolution swapped for the spatial
    /// gate's, used by the weight-shared parallel arrangement.
    fn shared_channel(&self) -> Result<ChannelAttention<T>> {
        if self.spatial.local1.weights.shape() != self.channel.local1.weights.shape() {
            return Err(Error::Config(format!(
                "shared local convolution shapes differ: {:?} vs {:?}",
                self.spatial.local1.weights.shape(),
                self.channel.local1.weights.shape()
            )));
        }
        Ok(ChannelAttention {
            shared1: self.channel.shared1.clone(),
            shared2: self.channel.shared2.clone(),
            local1: self.spatial.local1.clone(),
            local2: self.channel.local2.clone(),
        })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.apply_trace(x)?.0)
    }

    pub fn apply_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DualTrace<T>)> {
        match self.arrangement {
            Arrangement::SpatialChannel => {
                let (sp_att, sp_trace) = self.spatial.attention_map_trace(x)?;
                let mid = broadcast_mul(x, &sp_att)?;
                let (ch_att, ch_trace) = self.channel.attention_map_trace(&mid)?;
                let out = broadcast_mul(&mid, &ch_att)?;
                Ok((out, DualTrace::SpatialChannel { sp_att, sp_trace, mid, ch_att, ch_trace }))
            }
            Arrangement::ChannelSpatial => {
                let (ch_att, ch_trace) = self.channel.attention_map_trace(x)?;
                let mid = broadcast_mul(x, &ch_att)?;
                let (sp_att, sp_trace) = self.spatial.attention_map_trace(&mid)?;
                let out = broadcast_mul(&mid, &sp_att)?;
                Ok((out, DualTrace::ChannelSpatial { ch_att, ch_trace, mid, sp_att, sp_trace }))
            }
            Arrangement::Parallel | Arrangement::ParallelShared => {
                let channel = match self.arrangement {
                    Arrangement::ParallelShared => self.shared_channel()?,
                    _ => self.channel.clone(),
                };
                let (sp_att, sp_trace) = self.spatial.attention_map_trace(x)?;
                let (ch_att, ch_trace) = channel.attention_map_trace(x)?;
                let mid = broadcast_mul(x, &sp_att)?;
                let out = broadcast_mul(&mid, &ch_att)?;
                Ok((out, DualTrace::Parallel { sp_att, sp_trace, ch_att, ch_trace, mid }))
            }
        }
    }

    pub fn apply_backward(
        &self,
        x: &Tensor<T>,
        trace: &DualTrace<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, DualGrads<T>)> {
        match (self.arrangement, trace) {
            (
                Arrangement::SpatialChannel,
                DualTrace::SpatialChannel { sp_att, sp_trace, mid, ch_att, ch_trace },
            ) => {
                let (g_mid_a, g_ch_att) = broadcast_mul_backward(mid, ch_att, grad_out)?;
                let (g_mid_b, ch_grads) =
                    self.channel.attention_map_backward(mid, ch_trace, &g_ch_att)?;
                let g_mid = add(&g_mid_a, &g_mid_b)?;
                let (g_x_a, g_sp_att) = broadcast_mul_backward(x, sp_att, &g_mid)?;
                let (g_x_b, sp_grads) =
                    self.spatial.attention_map_backward(x, sp_trace, &g_sp_att)?;
                Ok((add(&g_x_a, &g_x_b)?, DualGrads { spatial: sp_grads, channel: ch_grads }))
            }
            (
                Arrangement::ChannelSpatial,
                DualTrace::ChannelSpatial { ch_att, ch_trace, mid, sp_att, sp_trace },
            ) => {
                let (g_mid_a, g_sp_att) = broadcast_mul_backward(mid, sp_att, grad_out)?;
                let (g_mid_b, sp_grads) =
                    self.spatial.attention_map_backward(mid, sp_trace, &g_sp_att)?;
                let g_mid = add(&g_mid_a, &g_mid_b)?;
                let (g_x_a, g_ch_att) = broadcast_mul_backward(x, ch_att, &g_mid)?;
                let (g_x_b, ch_grads) =
                    self.channel.attention_map_backward(x, ch_trace, &g_ch_att)?;
                Ok((add(&g_x_a, &g_x_b)?, DualGrads { spatial: sp_grads, channel: ch_grads }))
            }
            (
                Arrangement::Parallel | Arrangement::ParallelShared,
                DualTrace::Parallel { sp_att, sp_trace, ch_att, ch_trace, mid },
            ) => {
                let channel = match self.arrangement {
                    Arrangement::ParallelShared => self.shared_channel()?,
                    _ => self.channel.clone(),
                };
                let (g_mid, g_ch_att) = broadcast_mul_backward(mid, ch_att, grad_out)?;
                let (g_x_a, ch_grads) = channel.attention_map_backward(x, ch_trace, &g_ch_att)?;
                let (g_x_b, g_sp_att) = broadcast_mul_backward(x, sp_att, &g_mid)?;
                let (g_x_c, sp_grads) =
                    self.spatial.attention_map_backward(x, sp_trace, &g_sp_att)?;
                let g_x = add(&add(&g_x_a, &g_x_b)?, &g_x_c)?;
                let (sp_grads, ch_grads) = match self.arrangement {
                    // The shared convolution's gradient belongs to the
                    // spatial gate; the channel slot reports zeros.
                    Arrangement::ParallelShared => {
                        let mut sp = sp_grads;
                        add_grads(&mut sp.local1, &ch_grads.local1);
                        let mut ch = ch_grads;
                        ch.local1 = zero_grads_like(&self.channel.local1);
                        (sp, ch)
                    }
                    _ => (sp_grads, ch_grads),
                };
                Ok((g_x, DualGrads { spatial: sp_grads, channel: ch_grads }))
            }
            _ => Err(Error::validation(
                "DualAttention::apply_backward",
                "trace does not match arrangement",
            )),
        }
    }
}

pub const ALL_ARRANGEMENTS: [Arrangement; 4] = [
    Arrangement::SpatialChannel,
    Arrangement::ChannelSpatial,
    Arrangement::Parallel,
    Arrangement::ParallelShared,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use approx::assert_relative_eq;

    fn random_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(vec![n, c, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_parameters_gate_at_exactly_one_half() {
        let x = random_input(1, 6, 5, 4, 1);
        let sp = SpatialAttention::<f64>::zeros(6, 2).unwrap();
        let ch = ChannelAttention::<f64>::zeros(6, 2).unwrap();
        for &v in sp.attention_map(&x).unwrap().data() {
            assert_eq!(v, 0.5);
        }
        for &v in ch.attention_map(&x).unwrap().data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn zero_parameters_fix_every_arrangement_at_quarter_input() {
        let x = random_input(2, 5, 4, 3, 2);
        for arr in ALL_ARRANGEMENTS {
            let module = DualAttention::<f64>::zeros(5, 2, arr).unwrap();
            let out = module.apply(&x).unwrap();
            for (o, i) in out.data().iter().zip(x.data()) {
                assert_eq!(*o, 0.25 * i, "arrangement {:?}", arr);
            }
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let x = random_input(1, 4, 6, 6, 3);
        let mut rng = seeded_rng(9);
        let sp = SpatialAttention::<f64>::kaiming(4, 2, &mut rng).unwrap();
        let ch = ChannelAttention::<f64>::kaiming(4, 2, &mut rng).unwrap();
        for &v in sp.attention_map(&x).unwrap().data() {
            assert!(v > 0.0 && v < 1.0);
        }
        for &v in ch.attention_map(&x).unwrap().data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn channel_gate_commutes_with_spatial_shuffle() {
        let c = 5;
        let (h, w) = (4, 3);
        let x = random_input(1, c, h, w, 4);
        let mut rng = seeded_rng(11);
        let ch = ChannelAttention::<f64>::kaiming(c, 2, &mut rng).unwrap();

        // A fixed derangement of the spatial positions.
        let n = h * w;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let shuffled = Tensor::from_fn(vec![1, c, h, w], |idx| {
            let flat = idx[2] * w + idx[3];
            let src = perm[flat];
            x.at4(0, idx[1], src / w, src % w)
        })
        .unwrap();

        let att = ch.attention_map(&x).unwrap();
        let att_shuffled = ch.attention_map(&shuffled).unwrap();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let flat = y * w + xx;
                    let src = perm[flat];
                    assert_eq!(att_shuffled.at4(0, ci, y, xx), att.at4(0, ci, src / w, src % w));
                }
            }
        }
    }

    #[test]
    fn parallel_shared_uses_the_spatial_entry_convolution() {
        let x = random_input(1, 4, 3, 3, 5);
        let mut rng = seeded_rng(21);
        let mut module =
            DualAttention::<f64>::kaiming(4, 2, Arrangement::ParallelShared, &mut rng).unwrap();
        let before = module.apply(&x).unwrap();
        // The channel gate's own entry convolution is dead weight here.
        for v in module.channel.local1.weights.data_mut() {
            *v += 100.0;
        }
        let after = module.apply(&x).unwrap();
        assert_eq!(before, after);
        // The spatial entry convolution does feed both gates.
        for v in module.spatial.local1.weights.data_mut() {
            *v += 0.5;
        }
        let changed = module.apply(&x).unwrap();
        assert!(changed.data().iter().zip(before.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn sequential_orders_differ_on_generic_weights() {
        let x = random_input(1, 4, 4, 4, 6);
        let mut rng = seeded_rng(31);
        let sp = SpatialAttention::<f64>::kaiming(4, 2, &mut rng).unwrap();
        let ch = ChannelAttention::<f64>::kaiming(4, 2, &mut rng).unwrap();
        let a = DualAttention {
            spatial: sp.clone(),
            channel: ch.clone(),
            arrangement: Arrangement::SpatialChannel,
        };
        let b = DualAttention { spatial: sp, channel: ch, arrangement: Arrangement::ChannelSpatial };
        let out_a = a.apply(&x).unwrap();
        let out_b = b.apply(&x).unwrap();
        let diff: f64 = out_a
            .data()
            .iter()
            .zip(out_b.data())
            .map(|(p, q)| (p - q).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn gated_output_is_a_contraction() {
        let x = random_input(1, 4, 5, 5, 7);
        let mut rng = seeded_rng(41);
        let module =
            DualAttention::<f64>::kaiming(4, 2, Arrangement::SpatialChannel, &mut rng).unwrap();
        let out = module.apply(&x).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            if *i == 0.0 {
                assert_eq!(*o, 0.0);
            } else {
                assert!(o.abs() < i.abs());
                assert_relative_eq!(o.signum(), i.signum());
            }
        }
    }
}
