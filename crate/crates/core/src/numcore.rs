//! Numeric safety kernel: compensated summation, leaky ReLU, clipping,
//! max-subtracted softmax and cross-entropy.
//!
//! Everything is generic over [`Scalar`] so the same kernels run in single
//! precision for training and in double precision for gradient checks.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, NumericFault};

/// Floor applied to the true-class probability before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

/// Floating-point element type of parameters and activations.
pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn of(x: f32) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Symmetric clamp that lets NaN through.
#[inline]
pub fn clamp_sym<T: Scalar>(x: T, bound: T) -> T {
    if x > bound {
        bound
    } else if x < -bound {
        -bound
    } else {
        x
    }
}

/// Compensated running sum.
///
/// Uses the Neumaier form of the Kahan update, which also recovers small
/// terms that are absorbed by a larger running sum and later cancelled
/// (plain Kahan returns 0 for `[1e8, 1, -1e8]` in single precision).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanAccumulator<T = f32> {
    sum: T,
    compensation: T,
}

impl<T: Scalar> KahanAccumulator<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            compensation: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, term: T) {
        let t = self.sum + term;
        if self.sum.abs() >= term.abs() {
            self.compensation += (self.sum - t) + term;
        } else {
            self.compensation += (term - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.compensation
    }

    pub fn compensation(&self) -> T {
        self.compensation
    }
}

impl<T: Scalar> AddAssign<T> for KahanAccumulator<T> {
    fn add_assign(&mut self, rhs: T) {
        self.add(rhs);
    }
}

impl<T: Scalar> FromIterator<T> for KahanAccumulator<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut acc = Self::new();
        for t in iter {
            acc.add(t);
        }
        acc
    }
}

/// Compensated sum of a slice.
pub fn kahan_sum<T: Scalar>(terms: &[T]) -> T {
    terms
        .iter()
        .copied()
        .collect::<KahanAccumulator<T>>()
        .value()
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T, alpha: T) -> T {
    if x >= T::zero() {
        x
    } else {
        alpha * x
    }
}

/// Slope of [`leaky_relu`]; the positive branch owns zero.
#[inline]
pub fn leaky_relu_grad<T: Scalar>(x: T, alpha: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        alpha
    }
}

/// Symmetric clip to `[-bound, bound]`. NaN is reported as a fault,
/// infinities saturate.
#[inline]
pub fn clip<T: Scalar>(x: T, bound: T) -> Result<T, NumericFault> {
    if x.is_nan() {
        return Err(NumericFault::new("clip", x.as_f64()));
    }
    Ok(clamp_sym(x, bound))
}

/// Validates a freshly computed gradient and clips it. Both NaN and
/// infinities are faults here: a gradient must be finite before clipping.
#[inline]
pub fn clip_grad<T: Scalar>(x: T, bound: T, stage: &'static str) -> Result<T, NumericFault> {
    if !x.is_finite() {
        return Err(NumericFault::new(stage, x.as_f64()));
    }
    Ok(clamp_sym(x, bound))
}

/// Max-subtracted softmax written into `out`. The denominator is a plain
/// sequential sum.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) -> Result<(), NumericFault> {
    debug_assert_eq!(logits.len(), out.len());
    let mut max = T::neg_infinity();
    for &l in logits {
        if !l.is_finite() {
            return Err(NumericFault::new("softmax", l.as_f64()));
        }
        if l > max {
            max = l;
        }
    }
    let mut denom = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        denom += *o;
    }
    let inv = T::one() / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>, NumericFault> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut out)?;
    Ok(out)
}

/// Negative log-likelihood of `true_class` with the probability floored at
/// [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(probs: &[T], true_class: usize) -> Result<T, Error> {
    let p = *probs.get(true_class).ok_or(Error::ClassIndex {
        index: true_class,
        classes: probs.len(),
    })?;
    Ok(-p.max(T::of(PROB_FLOOR)).ln())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
