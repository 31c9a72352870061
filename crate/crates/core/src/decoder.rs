//! Decoder that turns backbone features into a small set of shared basis
//! maps: a stack of 3x3 convolutions, the dual attention gate, a pointwise
//! projection down to the basis count, and a fixed 2x bilinear upsample.
//!
//! The gated feature map is exposed both in the forward trace and as a
//! gradient injection point in the backward pass, so an auxiliary head can
//! hang off it without the decoder knowing about that head.

use crate::attention::{Arrangement, DualAttention, DualGrads, DualTrace};
use crate::error::Result;
use crate::init::kaiming_conv;
use crate::tensor::{
    add, conv2d, conv2d_backward, relu_neg_slope, relu_neg_slope_backward, resize_bilinear,
    resize_bilinear_backward, ConvGrads, ConvParams, Real, Tensor,
};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct BasesDecoder<T: Real> {
    /// 3x3 stride-1 layers, each followed by a rectifier.
    pub stack: Vec<ConvParams<T>>,
    pub attention: DualAttention<T>,
    /// 1x1 projection onto the basis maps.
    pub projection: ConvParams<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct StackStep<T: Real> {
    pub(crate) input: Tensor<T>,
    pub(crate) pre: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace<T: Real> {
    pub(crate) steps: Vec<StackStep<T>>,
    pub(crate) attention_input: Tensor<T>,
    pub(crate) att_trace: DualTrace<T>,
    pub(crate) attended: Tensor<T>,
    pub(crate) projected: Tensor<T>,
}

impl<T: Real> DecoderTrace<T> {
    /// Gated features right before the projection; the attachment point for
    /// auxiliary supervision.
    pub fn attended(&self) -> &Tensor<T> {
        &self.attended
    }
}

#[derive(Debug, Clone)]
pub struct DecoderGrads<T: Real> {
    pub stack: Vec<ConvGrads<T>>,
    pub attention: DualGrads<T>,
    pub projection: ConvGrads<T>,
}

impl<T: Real> BasesDecoder<T> {
    pub fn kaiming(
        in_channels: usize,
        hidden: usize,
        depth: usize,
        num_bases: usize,
        reduction: usize,
        arrangement: Arrangement,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut stack = Vec::with_capacity(depth);
        let mut c = in_channels;
        for _ in 0..depth {
            stack.push(kaiming_conv(hidden, c, 3, 1.0, rng)?);
            c = hidden;
        }
        let attention = DualAttention::kaiming(c, reduction, arrangement, rng)?;
        let projection = kaiming_conv(num_bases, c, 1, 1.0, rng)?;
        Ok(BasesDecoder { stack, attention, projection })
    }

    pub fn num_bases(&self) -> usize {
        self.projection.out_channels()
    }

    /// `(N, C, H, W)` features in, `(N, K, 2H, 2W)` basis maps out.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DecoderTrace<T>)> {
        let mut h = x.clone();
        let mut steps = Vec::with_capacity(self.stack.len());
        for conv in &self.stack {
            let pre = conv2d(&h, conv)?;
            let act = relu_neg_slope(&pre, 0.0);
            steps.push(StackStep { input: h, pre });
            h = act;
        }
        let attention_input = h;
        let (attended, att_trace) = self.attention.apply_trace(&attention_input)?;
        let projected = conv2d(&attended, &self.projection)?;
        let (_, _, ph, pw) = projected.dims4()?;
        let out = resize_bilinear(&projected, 2 * ph, 2 * pw)?;
        Ok((out, DecoderTrace { steps, attention_input, att_trace, attended, projected }))
    }

    /// Backward pass. `extra_attended_grad`, when given, is added to the
    /// gradient arriving at the gated features, which is how an auxiliary
    /// head contributes its pull on everything upstream of the projection.
    pub fn backward(
        &self,
        trace: &DecoderTrace<T>,
        grad_out: &Tensor<T>,
        extra_attended_grad: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, DecoderGrads<T>)> {
        let g_projected = resize_bilinear_backward(&trace.projected, grad_out)?;
        let (g_attended, g_projection) =
            conv2d_backward(&trace.attended, &self.projection, &g_projected)?;
        let g_attended = match extra_attended_grad {
            Some(extra) => add(&g_attended, extra)?,
            None => g_attended,
        };
        let (mut g, att_grads) =
            self.attention
                .apply_backward(&trace.attention_input, &trace.att_trace, &g_attended)?;
        let mut stack_grads = vec![None; self.stack.len()];
        for (i, (conv, step)) in self.stack.iter().zip(trace.steps.iter()).enumerate().rev() {
            let g_pre = relu_neg_slope_backward(&step.pre, 0.0, &g)?;
            let (g_in, cg) = conv2d_backward(&step.input, conv, &g_pre)?;
            stack_grads[i] = Some(cg);
            g = g_in;
        }
        Ok((
            g,
            DecoderGrads {
                stack: stack_grads.into_iter().map(|g| g.expect("filled in reverse walk")).collect(),
                attention: att_grads,
                projection: g_projection,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::tensor::scale;
    use approx::assert_relative_eq;

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(vec![1, c, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn output_shape_doubles_spatial_extent() {
        let mut rng = seeded_rng(0);
        let dec =
            BasesDecoder::<f64>::kaiming(3, 8, 2, 4, 2, Arrangement::SpatialChannel, &mut rng)
                .unwrap();
        let x = random_input(3, 6, 5, 1);
        let out = dec.forward(&x).unwrap();
        assert_eq!(out.shape(), &[1, 4, 12, 10]);
        assert_eq!(dec.num_bases(), 4);
    }

    #[test]
    fn identity_projection_with_idle_gate_upsamples_quarter_input() {
        // No stack, zero attention (gates 0.5 each), identity 1x1 projection:
        // the decoder reduces to upsample(0.25 * x).
        let c = 3;
        let x = random_input(c, 4, 4, 2);
        let eye = Tensor::from_fn(vec![c, c, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 }).unwrap();
        let dec = BasesDecoder {
            stack: vec![],
            attention: DualAttention::zeros(c, 2, Arrangement::Parallel).unwrap(),
            projection: ConvParams::same(eye, vec![0.0; c]).unwrap(),
        };
        let out = dec.forward(&x).unwrap();
        let expect = resize_bilinear(&scale(&x, 0.25), 8, 8).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn auxiliary_gradient_reaches_the_stack() {
        let mut rng = seeded_rng(5);
        let dec =
            BasesDecoder::<f64>::kaiming(2, 4, 1, 3, 2, Arrangement::SpatialChannel, &mut rng)
                .unwrap();
        let x = random_input(2, 4, 4, 3);
        let (out, trace) = dec.forward_trace(&x).unwrap();
        let zero_up = Tensor::zeros(out.shape().to_vec()).unwrap();
        let extra = Tensor::filled(trace.attended().shape().to_vec(), 0.1).unwrap();
        let (_, grads) = dec.backward(&trace, &zero_up, Some(&extra)).unwrap();
        // With zero upstream gradient only the injected signal is at work.
        let total: f64 = grads.stack[0].weights.data().iter().map(|v| v.abs()).sum();
        assert!(total > 0.0);
        let (_, no_extra) = dec.backward(&trace, &zero_up, None).unwrap();
        let silent: f64 = no_extra.stack[0].weights.data().iter().map(|v| v.abs()).sum();
        assert_eq!(silent, 0.0);
    }
}
