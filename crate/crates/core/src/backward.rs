//! Backpropagation with two-level buffer discipline.
//!
//! Weight-gradient accumulators are summed across every image of a batch
//! and only cleared by [`GradientSet::zero_batch_grads`]. The propagation
//! buffers (`dense_grad`, `pool1_grad`, `conv1_grad`) carry one image's
//! error signal between layers and are cleared at the start of every
//! [`Net::backward_image`].
//!
//! Each per-image contribution is validated (NaN/Inf is a fault) and
//! clipped to `grad_clip` before it is added to an accumulator.

use crate::error::{Error, NumericFault};
use crate::forward::{pool_source_index, ActivationSet, ConvShape, Net};
use crate::numcore::{clip_grad, leaky_relu_grad, Scalar};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    /// Batch accumulators, same shape as the weights.
    pub acc: ParamSet<T>,
    pub dense_grad: Vec<T>,
    pub pool1_grad: Vec<T>,
    pub conv1_grad: Vec<T>,
    batch_zeroings: u64,
    image_zeroings: u64,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new(net: &Net) -> Self {
        let d = &net.dims;
        Self {
            acc: ParamSet::zeros(d),
            dense_grad: vec![T::zero(); d.flattened],
            pool1_grad: vec![T::zero(); d.pool1_len()],
            conv1_grad: vec![T::zero(); d.conv1_len()],
            batch_zeroings: 0,
            image_zeroings: 0,
        }
    }

    /// Clears the six weight-gradient accumulators. Propagation buffers are
    /// left alone.
    pub fn zero_batch_grads(&mut self) {
        self.acc.fill(T::zero());
        self.batch_zeroings += 1;
    }

    fn zero_propagation(&mut self) {
        self.dense_grad.fill(T::zero());
        self.pool1_grad.fill(T::zero());
        self.conv1_grad.fill(T::zero());
        self.image_zeroings += 1;
    }

    /// How many times the accumulators have been cleared.
    pub fn batch_zeroings(&self) -> u64 {
        self.batch_zeroings
    }

    /// How many times the propagation buffers have been cleared (once per
    /// backward pass).
    pub fn image_zeroings(&self) -> u64 {
        self.image_zeroings
    }

    /// Multiplies every accumulator by `factor` (`1 / n` gives the batch
    /// mean).
    pub fn scale(&mut self, factor: T) {
        for arr in self.acc.arrays_mut() {
            for g in arr.iter_mut() {
                *g = *g * factor;
            }
        }
    }
}

/// Accumulates the adjoint of a convolution into its weight and bias
/// accumulators and, if requested, writes the input gradient.
///
/// `delta` is the gradient with respect to the pre-activation output
/// (planar, `filters × O²`).
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    net: &Net,
    shape: &ConvShape,
    input: &[T],
    weights: &[T],
    delta: &[T],
    w_acc: &mut [T],
    b_acc: &mut [T],
    input_grad: Option<&mut [T]>,
    stage: &'static str,
) -> Result<(), NumericFault> {
    let o = shape.out_side();
    let k = shape.kernel;
    let cin = shape.in_channels;
    let (ch_stride, col_stride) = shape.strides();
    let row_stride = shape.in_side * col_stride;
    let wpf = shape.weights_per_filter();
    let bound = T::of(net.policy.grad_clip);

    // Per-filter contributions are independent: compute in parallel, then
    // validate, clip and accumulate in a fixed order.
    let per_filter: Vec<(Vec<T>, T)> = net.exec.map_range(shape.filters, |f| {
        let d = &delta[f * o * o..(f + 1) * o * o];
        let mut wg = vec![T::zero(); wpf];
        for ky in 0..k {
            for kx in 0..k {
                for c in 0..cin {
                    let mut s = T::zero();
                    for y in 0..o {
                        let in_row = (y + ky) * row_stride + c * ch_stride;
                        for x in 0..o {
                            s += d[y * o + x] * input[in_row + (x + kx) * col_stride];
                        }
                    }
                    wg[ky * k * cin + kx * cin + c] = s;
                }
            }
        }
        (wg, d.iter().fold(T::zero(), |a, &v| a + v))
    });
    for (f, (wg, bg)) in per_filter.into_iter().enumerate() {
        for (acc, g) in w_acc[f * wpf..(f + 1) * wpf].iter_mut().zip(wg) {
            *acc += clip_grad(g, bound, stage)?;
        }
        b_acc[f] += clip_grad(bg, bound, stage)?;
    }

    if let Some(grad) = input_grad {
        // full-correlation adjoint: scatter each output delta through the kernel
        for f in 0..shape.filters {
            let wf = &weights[f * wpf..(f + 1) * wpf];
            let d = &delta[f * o * o..(f + 1) * o * o];
            for y in 0..o {
                for x in 0..o {
                    let g = d[y * o + x];
                    if g == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let in_row = (y + ky) * row_stride;
                        for kx in 0..k {
                            let in_pos = in_row + (x + kx) * col_stride;
                            let w_pos = ky * k * cin + kx * cin;
                            for c in 0..cin {
                                grad[in_pos + c * ch_stride] += g * wf[w_pos + c];
                            }
                        }
                    }
                }
            }
        }
        for v in grad.iter_mut() {
            *v = clip_grad(*v, bound, stage)?;
        }
    }
    Ok(())
}

impl Net {
    /// Backpropagates one image through the network, adding its gradient to
    /// the batch accumulators in `grads`.
    ///
    /// `acts` must hold a completed forward pass of this exact input.
    /// Leaky-ReLU slopes are recovered from the sign of the stored
    /// activations; the forward pre-activation clip is treated as identity.
    pub fn backward_image<T: Scalar>(
        &self,
        acts: &ActivationSet<T>,
        true_class: usize,
        weights: &ParamSet<T>,
        grads: &mut GradientSet<T>,
    ) -> Result<(), Error> {
        let d = &self.dims;
        if true_class >= d.num_classes {
            return Err(Error::ClassIndex {
                index: true_class,
                classes: d.num_classes,
            });
        }
        weights.check_shape(d)?;
        grads.acc.check_shape(d)?;
        let bound = T::of(self.policy.grad_clip);
        let alpha = T::of(self.policy.leaky_alpha);
        let flat_len = d.flattened;

        grads.zero_propagation();

        // softmax + cross-entropy
        let mut deltas = acts.probs.clone();
        deltas[true_class] = deltas[true_class] - T::one();
        for &dc in &deltas {
            if !dc.is_finite() {
                return Err(NumericFault::new("output delta", dc.as_f64()).into());
            }
        }

        // dense layer
        let flat = &acts.conv2_out;
        for (c, &dc) in deltas.iter().enumerate() {
            let row = &mut grads.acc.output_w[c * flat_len..(c + 1) * flat_len];
            for (g, &x) in row.iter_mut().zip(flat) {
                *g += clip_grad(dc * x, bound, "dense weights")?;
            }
            grads.acc.output_b[c] += clip_grad(dc, bound, "dense bias")?;
        }
        for (i, (out, &x)) in grads.dense_grad.iter_mut().zip(flat).enumerate() {
            let mut s = T::zero();
            for (c, &dc) in deltas.iter().enumerate() {
                s += dc * weights.output_w[c * flat_len + i];
            }
            *out = clip_grad(s * leaky_relu_grad(x, alpha), bound, "dense propagation")?;
        }

        // conv2: weights, bias and gradient into the pooled map
        conv_backward(
            self,
            &ConvShape::conv2(d),
            &acts.pool1_out,
            &weights.conv2_w,
            &grads.dense_grad,
            &mut grads.acc.conv2_w,
            &mut grads.acc.conv2_b,
            Some(&mut grads.pool1_grad),
            "conv2 backward",
        )?;

        // pool routing: only the recorded winner of each window receives
        // the gradient
        for (i, &g) in grads.pool1_grad.iter().enumerate() {
            let src = pool_source_index(i, d.pool1_out, acts.pool1_argmax[i]);
            let routed = g * leaky_relu_grad(acts.conv1_out[src], alpha);
            grads.conv1_grad[src] = clip_grad(routed, bound, "pool routing")?;
        }

        conv_backward(
            self,
            &ConvShape::conv1(d),
            &acts.input,
            &weights.conv1_w,
            &grads.conv1_grad,
            &mut grads.acc.conv1_w,
            &mut grads.acc.conv1_b,
            None,
            "conv1 backward",
        )?;
        Ok(())
    }
}
