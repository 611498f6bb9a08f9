//! Bias-corrected Adam with weight clipping.

use crate::config::{DerivedDims, NumericPolicy, TrainConfig};
use crate::error::{Error, NumericFault};
use crate::params::ParamSet;

/// First and second moments plus the global step counter.
///
/// The step counter runs monotonically across epochs; it is not persisted
/// with the weights, so a reloaded session restarts bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub global_step: u64,
}

impl AdamState {
    pub fn new(dims: &DerivedDims) -> Self {
        Self {
            m: ParamSet::zeros(dims),
            v: ParamSet::zeros(dims),
            global_step: 0,
        }
    }
}

/// Bias-corrected step size `lr * sqrt(1 - b2^t) / (1 - b1^t)`, evaluated in
/// double precision.
pub fn bias_corrected_lr(cfg: &TrainConfig, step: u64) -> f64 {
    let t = step as f64;
    cfg.learning_rate * (1.0 - cfg.beta2.powf(t)).sqrt() / (1.0 - cfg.beta1.powf(t))
}

/// One Adam update over every parameter array, using whatever gradient
/// buffer it is handed (the trainer passes batch means).
///
/// Increments `state.global_step` before computing the step size. Returns
/// the step size that was applied.
pub fn adam_step(
    weights: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    policy: &NumericPolicy,
) -> Result<f32, Error> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::Shape {
            name: "adam buffers",
            expected: weights.len(),
            actual: grads.len(),
        });
    }
    state.global_step += 1;
    let lr_t = bias_corrected_lr(cfg, state.global_step) as f32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    // complements rounded once from double precision; `1.0 - b2` in f32
    // loses enough bits to push large-gradient first steps past lr
    let c1 = (1.0 - cfg.beta1) as f32;
    let c2 = (1.0 - cfg.beta2) as f32;
    let eps = cfg.epsilon as f32;
    let bound = policy.weight_clip;

    let ws = weights.arrays_mut();
    let ms = state.m.arrays_mut();
    let vs = state.v.arrays_mut();
    for (((w, g), m), v) in ws.into_iter().zip(grads.arrays()).zip(ms).zip(vs) {
        for i in 0..w.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            w[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            if !w[i].is_finite() {
                return Err(NumericFault::new("adam update", w[i] as f64).into());
            }
            w[i] = w[i].clamp(-bound, bound);
        }
    }
    Ok(lr_t)
}
