//! Double-precision reference network and finite-difference gradient
//! checker.
//!
//! Nothing here shares inner-loop code with [`crate::forward`] or
//! [`crate::backward`]: every index is recomputed from scratch in plain
//! nested loops, sums are plain left-to-right folds, and the whole pipeline
//! runs in `f64`. Intended for small configurations only.
#![allow(clippy::needless_range_loop)]

use crate::backward::GradientSet;
use crate::config::{DerivedDims, NumericPolicy};
use crate::error::Error;
use crate::exec::Exec;
use crate::forward::Net;
use crate::params::ParamSet;

/// Every intermediate of one oracle forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    pub conv1_pre: Vec<f64>,
    pub conv1: Vec<f64>,
    pub pool: Vec<f64>,
    pub pool_arg: Vec<usize>,
    pub conv2_pre: Vec<f64>,
    pub conv2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn leaky(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

fn clamp(x: f64, b: f64) -> f64 {
    x.max(-b).min(b)
}

/// Reference pipeline in double precision.
pub fn oracle_forward(
    dims: &DerivedDims,
    policy: &NumericPolicy,
    w: &ParamSet<f64>,
    input: &[f64],
) -> OracleTrace {
    let s = dims.input_size;
    let k1 = dims.conv1_kernel;
    let f1 = dims.conv1_filters;
    let o1 = dims.conv1_out;
    let p = dims.pool1_out;
    let k2 = dims.conv2_kernel;
    let f2 = dims.conv2_filters;
    let o2 = dims.conv2_out;
    let n_cls = dims.num_classes;
    let flat = dims.flattened;
    let bound = policy.preact_clip as f64;
    let alpha = policy.leaky_alpha as f64;

    let mut conv1_pre = vec![0.0; f1 * o1 * o1];
    for f in 0..f1 {
        for y in 0..o1 {
            for x in 0..o1 {
                let mut acc = w.conv1_b[f];
                for ky in 0..k1 {
                    for kx in 0..k1 {
                        for c in 0..3 {
                            let pixel = input[((y + ky) * s + (x + kx)) * 3 + c];
                            let weight = w.conv1_w[f * k1 * k1 * 3 + ky * k1 * 3 + kx * 3 + c];
                            acc += pixel * weight;
                        }
                    }
                }
                conv1_pre[f * o1 * o1 + y * o1 + x] = acc;
            }
        }
    }
    let conv1: Vec<f64> = conv1_pre
        .iter()
        .map(|&v| leaky(clamp(v, bound), alpha))
        .collect();

    let mut pool = vec![0.0; f1 * p * p];
    let mut pool_arg = vec![0; f1 * p * p];
    for f in 0..f1 {
        for y in 0..p {
            for x in 0..p {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (n, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = conv1[f * o1 * o1 + (2 * y + dy) * o1 + (2 * x + dx)];
                    if n == 0 || v > best {
                        best = v;
                        arg = n;
                    }
                }
                pool[f * p * p + y * p + x] = best;
                pool_arg[f * p * p + y * p + x] = arg;
            }
        }
    }

    let mut conv2_pre = vec![0.0; f2 * o2 * o2];
    for f in 0..f2 {
        for y in 0..o2 {
            for x in 0..o2 {
                let mut acc = w.conv2_b[f];
                for ky in 0..k2 {
                    for kx in 0..k2 {
                        for c in 0..f1 {
                            let v = pool[c * p * p + (y + ky) * p + (x + kx)];
                            let weight = w.conv2_w[f * k2 * k2 * f1 + ky * k2 * f1 + kx * f1 + c];
                            acc += v * weight;
                        }
                    }
                }
                conv2_pre[f * o2 * o2 + y * o2 + x] = acc;
            }
        }
    }
    let conv2: Vec<f64> = conv2_pre
        .iter()
        .map(|&v| leaky(clamp(v, bound), alpha))
        .collect();

    let mut logits = vec![0.0; n_cls];
    for c in 0..n_cls {
        let mut acc = 0.0;
        for i in 0..flat {
            acc += conv2[i] * w.output_w[c * flat + i];
        }
        logits[c] = acc + w.output_b[c];
    }
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / total).collect();

    OracleTrace {
        conv1_pre,
        conv1,
        pool,
        pool_arg,
        conv2_pre,
        conv2,
        logits,
        probs,
    }
}

/// Floored negative log-likelihood in double precision.
pub fn oracle_loss(trace: &OracleTrace, true_class: usize) -> f64 {
    -trace.probs[true_class].max(1e-12).ln()
}

/// Activation pattern of a forward pass: which side of every kink each
/// unit sits on. Within one pattern the loss is smooth in every parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    signs: Vec<bool>,
    saturated: Vec<bool>,
    pool_arg: Vec<usize>,
}

fn pattern(trace: &OracleTrace, bound: f64) -> Pattern {
    let pre = trace.conv1_pre.iter().chain(&trace.conv2_pre);
    Pattern {
        signs: pre.clone().map(|&v| v >= 0.0).collect(),
        saturated: pre.map(|&v| v.abs() > bound).collect(),
        pool_arg: trace.pool_arg.clone(),
    }
}

/// Central-difference gradients of the loss with respect to every
/// parameter, in flat persisted order.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGradients {
    pub grads: Vec<f64>,
    /// Parameters whose ±h perturbation moves some unit across a leaky-ReLU
    /// kink, a pool tie or a clip boundary; differences are invalid there.
    pub masked: Vec<bool>,
}

pub fn finite_diff_grads(
    dims: &DerivedDims,
    policy: &NumericPolicy,
    weights: &ParamSet<f64>,
    input: &[f64],
    true_class: usize,
    h: f64,
    exec: Exec,
) -> NumericGradients {
    let bound = policy.preact_clip as f64;
    let base_trace = oracle_forward(dims, policy, weights, input);
    let base = pattern(&base_trace, bound);
    let any_saturated = base.saturated.iter().any(|&s| s);
    let flat = weights.to_flat();

    let results = exec.map_range(flat.len(), |j| {
        let eval = |delta: f64| {
            let mut p = flat.clone();
            p[j] += delta;
            let w = ParamSet::from_flat(dims, &p).expect("same shape");
            oracle_forward(dims, policy, &w, input)
        };
        let plus = eval(h);
        let minus = eval(-h);
        let g = (oracle_loss(&plus, true_class) - oracle_loss(&minus, true_class)) / (2.0 * h);
        let masked =
            any_saturated || pattern(&plus, bound) != base || pattern(&minus, bound) != base;
        (g, masked)
    });
    let (grads, masked) = results.into_iter().unzip();
    NumericGradients { grads, masked }
}

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub masked: usize,
    /// Largest `|analytic - numeric| / max(|numeric|, 1e-6)` over unmasked
    /// parameters.
    pub max_rel_err: f64,
    pub worst_param: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Folds several reports into one (max error, summed counts).
    pub fn merge(reports: &[GradCheckReport]) -> GradCheckReport {
        let mut out = GradCheckReport {
            checked: 0,
            masked: 0,
            max_rel_err: 0.0,
            worst_param: None,
        };
        for r in reports {
            out.checked += r.checked;
            out.masked += r.masked;
            if r.max_rel_err >= out.max_rel_err {
                out.max_rel_err = r.max_rel_err;
                out.worst_param = r.worst_param;
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-6)
}

/// Runs the network's own backward pass (instantiated in `f64`) and
/// compares it with central differences of the oracle loss.
pub fn gradient_check(
    net: &Net,
    weights: &ParamSet<f64>,
    input: &[f64],
    true_class: usize,
    h: f64,
) -> Result<GradCheckReport, Error> {
    let mut acts = net.activations::<f64>();
    net.forward(weights, input, &mut acts)?;
    let mut grads = GradientSet::<f64>::new(net);
    net.backward_image(&acts, true_class, weights, &mut grads)?;
    let analytic = grads.acc.to_flat();

    let numeric = finite_diff_grads(
        &net.dims,
        &net.policy,
        weights,
        input,
        true_class,
        h,
        net.exec,
    );
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &NumericGradients) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        masked: 0,
        max_rel_err: 0.0,
        worst_param: None,
    };
    for (j, (&a, (&n, &m))) in analytic
        .iter()
        .zip(numeric.grads.iter().zip(&numeric.masked))
        .enumerate()
    {
        if m {
            report.masked += 1;
            continue;
        }
        report.checked += 1;
        let e = relative_error(a, n);
        if e > report.max_rel_err || report.worst_param.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst_param = Some(j);
        }
    }
    report
}

/// Single-precision convolution written without any hoisting: every index
/// is recomputed from the loop variables. Summation order matches the
/// production kernel (per-tap channel sum, then taps in row-major order).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_f32(
    input: &[f32],
    planar: bool,
    in_side: usize,
    in_channels: usize,
    kernel: usize,
    weights: &[f32],
    biases: &[f32],
    policy: &NumericPolicy,
) -> Vec<f32> {
    let filters = biases.len();
    let out_side = in_side - kernel + 1;
    let mut out = vec![0.0f32; filters * out_side * out_side];
    for f in 0..filters {
        for y in 0..out_side {
            for x in 0..out_side {
                let mut sum = 0.0f32;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let mut tap = 0.0f32;
                        for c in 0..in_channels {
                            let idx = if planar {
                                c * in_side * in_side + (y + ky) * in_side + (x + kx)
                            } else {
                                ((y + ky) * in_side + (x + kx)) * in_channels + c
                            };
                            let widx = f * kernel * kernel * in_channels
                                + ky * kernel * in_channels
                                + kx * in_channels
                                + c;
                            tap += input[idx] * weights[widx];
                        }
                        sum += tap;
                    }
                }
                let pre = (sum + biases[f])
                    .max(-policy.preact_clip)
                    .min(policy.preact_clip);
                out[f * out_side * out_side + y * out_side + x] = if pre >= 0.0 {
                    pre
                } else {
                    policy.leaky_alpha * pre
                };
            }
        }
    }
    out
}
