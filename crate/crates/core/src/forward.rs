//! Inference pipeline.
//!
//! Tensor layouts:
//!
//! * network input: row-major, interleaved RGB, index `(y * S + x) * 3 + c`
//! * every activation map: filter-major planar, index `f * O² + y * O + x`
//! * conv weights: `f * (K² * Cin) + ky * (K * Cin) + kx * Cin + c`
//! * dense weights: class-major, `class * F + i`, where the flattened input
//!   is conv2's planar output taken as-is

use crate::config::{DerivedDims, NumericPolicy, PIXEL_SCALE};
use crate::error::{DatasetError, Error, NumericFault};
use crate::exec::Exec;
use crate::numcore::{clamp_sym, leaky_relu, softmax_into, KahanAccumulator, Scalar};
use crate::params::ParamSet;

/// Precomputed nearest-neighbour source coordinates for each network
/// input row and column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResizePlan {
    sy_lookup: Vec<usize>,
    sx_lookup: Vec<usize>,
    source_side: usize,
}

impl ResizePlan {
    /// `lookup[i] = min(floor((i + 0.5) * source / input), source - 1)`,
    /// evaluated exactly in integers as `(2i + 1) * source / (2 * input)`.
    pub fn new(input_size: usize, source_side: usize) -> Result<Self, DatasetError> {
        if input_size == 0 || source_side < input_size {
            return Err(DatasetError::SourceTooSmall {
                source_side,
                input_size,
            });
        }
        let lookup: Vec<usize> = (0..input_size)
            .map(|i| ((2 * i + 1) * source_side / (2 * input_size)).min(source_side - 1))
            .collect();
        Ok(Self {
            sx_lookup: lookup.clone(),
            sy_lookup: lookup,
            source_side,
        })
    }

    pub fn input_size(&self) -> usize {
        self.sy_lookup.len()
    }

    pub fn source_side(&self) -> usize {
        self.source_side
    }

    pub fn sy_lookup(&self) -> &[usize] {
        &self.sy_lookup
    }

    pub fn sx_lookup(&self) -> &[usize] {
        &self.sx_lookup
    }

    /// Maps a square `source_side² × 3` byte frame to the normalised network
    /// input: two table lookups per pixel and a multiply by [`PIXEL_SCALE`].
    pub fn resize_normalize(&self, rgb: &[u8], out: &mut [f32]) -> Result<(), DatasetError> {
        let src = self.source_side;
        let side = self.input_size();
        if rgb.len() != src * src * 3 {
            return Err(DatasetError::BufferSize {
                expected: src * src * 3,
                actual: rgb.len(),
            });
        }
        if out.len() != side * side * 3 {
            return Err(DatasetError::BufferSize {
                expected: side * side * 3,
                actual: out.len(),
            });
        }
        for (y, row) in out.chunks_exact_mut(side * 3).enumerate() {
            let src_row = self.sy_lookup[y] * src;
            for (x, px) in row.chunks_exact_mut(3).enumerate() {
                let s = (src_row + self.sx_lookup[x]) * 3;
                px[0] = rgb[s] as f32 * PIXEL_SCALE;
                px[1] = rgb[s + 1] as f32 * PIXEL_SCALE;
                px[2] = rgb[s + 2] as f32 * PIXEL_SCALE;
            }
        }
        Ok(())
    }

    pub fn resize_normalize_vec(&self, rgb: &[u8]) -> Result<Vec<f32>, DatasetError> {
        let side = self.input_size();
        let mut out = vec![0.0; side * side * 3];
        self.resize_normalize(rgb, &mut out)?;
        Ok(out)
    }
}

/// How a convolution reads its input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    /// `(y * S + x) * C + c`, the RGB input.
    Interleaved,
    /// `c * S² + y * S + x`, pooled feature maps.
    Planar,
}

/// Geometry of one valid, stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_side: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub filters: usize,
    pub layout: InputLayout,
}

impl ConvShape {
    pub fn conv1(d: &DerivedDims) -> Self {
        Self {
            in_side: d.input_size,
            in_channels: d.input_channels,
            kernel: d.conv1_kernel,
            filters: d.conv1_filters,
            layout: InputLayout::Interleaved,
        }
    }

    pub fn conv2(d: &DerivedDims) -> Self {
        Self {
            in_side: d.pool1_out,
            in_channels: d.conv1_filters,
            kernel: d.conv2_kernel,
            filters: d.conv2_filters,
            layout: InputLayout::Planar,
        }
    }

    pub fn out_side(&self) -> usize {
        self.in_side - self.kernel + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_side * self.in_side * self.in_channels
    }

    pub fn output_len(&self) -> usize {
        let o = self.out_side();
        self.filters * o * o
    }

    pub fn weights_per_filter(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Stride between channels and between columns for this layout.
    pub(crate) fn strides(&self) -> (usize, usize) {
        match self.layout {
            InputLayout::Interleaved => (1, self.in_channels),
            InputLayout::Planar => (self.in_side * self.in_side, 1),
        }
    }
}

fn check_len(name: &'static str, actual: usize, expected: usize) -> Result<(), Error> {
    if actual != expected {
        return Err(Error::Shape {
            name,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Valid convolution + bias, clipped to `policy.preact_clip`, followed by
/// leaky ReLU. Offsets that do not depend on the inner loops are hoisted.
///
/// For each output cell the sum runs over kernel rows, then kernel
/// columns; the channel products of one tap are summed first and the tap
/// total is then added to the running sum.
pub fn conv_forward<T: Scalar>(
    exec: Exec,
    shape: &ConvShape,
    input: &[T],
    weights: &[T],
    biases: &[T],
    policy: &NumericPolicy,
    out: &mut [T],
) -> Result<(), Error> {
    check_len("conv input", input.len(), shape.input_len())?;
    check_len(
        "conv weights",
        weights.len(),
        shape.filters * shape.weights_per_filter(),
    )?;
    check_len("conv biases", biases.len(), shape.filters)?;
    check_len("conv output", out.len(), shape.output_len())?;

    let o = shape.out_side();
    let s = shape.in_side;
    let k = shape.kernel;
    let cin = shape.in_channels;
    let (ch_stride, col_stride) = shape.strides();
    let row_stride = s * col_stride;
    let wpf = shape.weights_per_filter();
    let bound = T::of(policy.preact_clip);
    let alpha = T::of(policy.leaky_alpha);

    exec.for_each_chunk(out, o * o, |f, plane| {
        let wf = &weights[f * wpf..(f + 1) * wpf];
        let bias = biases[f];
        for y in 0..o {
            let out_row = y * o;
            for x in 0..o {
                let mut sum = T::zero();
                for ky in 0..k {
                    let in_row = (y + ky) * row_stride;
                    let w_row = ky * k * cin;
                    for kx in 0..k {
                        let in_pos = in_row + (x + kx) * col_stride;
                        let w_pos = w_row + kx * cin;
                        let mut tap = T::zero();
                        for c in 0..cin {
                            tap += input[in_pos + c * ch_stride] * wf[w_pos + c];
                        }
                        sum += tap;
                    }
                }
                // clamp keeps NaN, which is reported after the loop
                plane[out_row + x] = leaky_relu(clamp_sym(sum + bias, bound), alpha);
            }
        }
    });

    if let Some(bad) = out.iter().find(|v| v.is_nan()) {
        return Err(NumericFault::new("conv forward", bad.as_f64()).into());
    }
    Ok(())
}

/// Non-overlapping 2×2 max-pool over planar maps. `argmax` records the
/// winning cell of each window as `dy * 2 + dx`; strictly-greater
/// comparison lets the first maximum win ties.
pub fn maxpool_forward<T: Scalar>(
    exec: Exec,
    channels: usize,
    in_side: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [u8],
) -> Result<(), Error> {
    let p = in_side / 2;
    check_len("pool input", input.len(), channels * in_side * in_side)?;
    check_len("pool output", out.len(), channels * p * p)?;
    check_len("pool argmax", argmax.len(), channels * p * p)?;

    let pool_plane = |ch: usize, plane: &mut [T], idx: &mut [u8]| {
        let src = &input[ch * in_side * in_side..(ch + 1) * in_side * in_side];
        for py in 0..p {
            for px in 0..p {
                let base = (2 * py) * in_side + 2 * px;
                let cells = [
                    src[base],
                    src[base + 1],
                    src[base + in_side],
                    src[base + in_side + 1],
                ];
                let mut best = 0u8;
                for (i, &v) in cells.iter().enumerate().skip(1) {
                    if v > cells[best as usize] {
                        best = i as u8;
                    }
                }
                plane[py * p + px] = cells[best as usize];
                idx[py * p + px] = best;
            }
        }
    };

    // Values and indices are split per channel so both can be written
    // from the same task.
    let mut pairs: Vec<(&mut [T], &mut [u8])> = out
        .chunks_mut(p * p)
        .zip(argmax.chunks_mut(p * p))
        .collect();
    exec.for_each_chunk(&mut pairs, 1, |ch, pair| {
        let (plane, idx) = &mut pair[0];
        pool_plane(ch, plane, idx);
    });
    Ok(())
}

/// Position in the unpooled map that pooled cell `i` came from.
#[inline]
pub fn pool_source_index(i: usize, pooled_side: usize, argmax: u8) -> usize {
    let plane = pooled_side * pooled_side;
    let ch = i / plane;
    let rem = i % plane;
    let (py, px) = (rem / pooled_side, rem % pooled_side);
    let in_side = pooled_side * 2;
    let (dy, dx) = ((argmax / 2) as usize, (argmax % 2) as usize);
    ch * in_side * in_side + (2 * py + dy) * in_side + 2 * px + dx
}

/// Dense layer with compensated dot products:
/// `logit[c] = kahan(x[i] * w[c * F + i]) + b[c]`.
pub fn dense_forward<T: Scalar>(
    input: &[T],
    weights: &[T],
    biases: &[T],
    logits: &mut [T],
) -> Result<(), Error> {
    let f = input.len();
    check_len("dense weights", weights.len(), f * logits.len())?;
    check_len("dense biases", biases.len(), logits.len())?;
    for (c, logit) in logits.iter_mut().enumerate() {
        let row = &weights[c * f..(c + 1) * f];
        let mut acc = KahanAccumulator::new();
        for (x, w) in input.iter().zip(row) {
            acc.add(*x * *w);
        }
        *logit = acc.value() + biases[c];
    }
    Ok(())
}

/// Per-image forward buffers, allocated once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet<T = f32> {
    pub input: Vec<T>,
    pub conv1_out: Vec<T>,
    pub pool1_out: Vec<T>,
    pub pool1_argmax: Vec<u8>,
    pub conv2_out: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Scalar> ActivationSet<T> {
    pub fn new(dims: &DerivedDims) -> Self {
        Self {
            input: vec![T::zero(); dims.input_len()],
            conv1_out: vec![T::zero(); dims.conv1_len()],
            pool1_out: vec![T::zero(); dims.pool1_len()],
            pool1_argmax: vec![0; dims.pool1_len()],
            conv2_out: vec![T::zero(); dims.flattened],
            logits: vec![T::zero(); dims.num_classes],
            probs: vec![T::zero(); dims.num_classes],
        }
    }
}

/// Network geometry plus the policies and execution strategy that every
/// forward and backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Net {
    pub dims: DerivedDims,
    pub policy: NumericPolicy,
    pub exec: Exec,
}

impl Net {
    pub fn new(dims: DerivedDims, policy: NumericPolicy) -> Self {
        Self {
            dims,
            policy,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn activations<T: Scalar>(&self) -> ActivationSet<T> {
        ActivationSet::new(&self.dims)
    }

    /// Runs the full pipeline on `input`, filling every field of `acts`,
    /// and returns the class probabilities.
    pub fn forward<'a, T: Scalar>(
        &self,
        weights: &ParamSet<T>,
        input: &[T],
        acts: &'a mut ActivationSet<T>,
    ) -> Result<&'a [T], Error> {
        check_len("input", input.len(), self.dims.input_len())?;
        acts.input.copy_from_slice(input);
        self.forward_loaded(weights, acts)
    }

    /// Like [`Net::forward`] for an input already written to `acts.input`.
    pub fn forward_loaded<'a, T: Scalar>(
        &self,
        weights: &ParamSet<T>,
        acts: &'a mut ActivationSet<T>,
    ) -> Result<&'a [T], Error> {
        let d = &self.dims;
        weights.check_shape(d)?;
        conv_forward(
            self.exec,
            &ConvShape::conv1(d),
            &acts.input,
            &weights.conv1_w,
            &weights.conv1_b,
            &self.policy,
            &mut acts.conv1_out,
        )?;
        maxpool_forward(
            self.exec,
            d.conv1_filters,
            d.conv1_out,
            &acts.conv1_out,
            &mut acts.pool1_out,
            &mut acts.pool1_argmax,
        )?;
        conv_forward(
            self.exec,
            &ConvShape::conv2(d),
            &acts.pool1_out,
            &weights.conv2_w,
            &weights.conv2_b,
            &self.policy,
            &mut acts.conv2_out,
        )?;
        dense_forward(
            &acts.conv2_out,
            &weights.output_w,
            &weights.output_b,
            &mut acts.logits,
        )?;
        softmax_into(&acts.logits, &mut acts.probs)?;
        Ok(&acts.probs)
    }
}
