//! Training-time scalar schedules.

use super::AugmentationPolicy;
use crate::error::{arg_err, Result};

pub const DEFAULT_LR_MAX: f64 = 1e-3;
pub const DEFAULT_LR_MIN: f64 = 1e-5;

/// Per-transform application probability at `iter`.
///
/// Ramps linearly from `p_start` at iteration 0 to `p_end` at `total_iters`,
/// but only changes every `step` iterations. A `constant_p` overrides the ramp.
pub fn scheduled_probability(iter: u64, policy: &AugmentationPolicy) -> Result<f64> {
    policy.validate()?;
    if iter > policy.total_iters {
        return arg_err(format!("iteration {iter} beyond schedule length {}", policy.total_iters));
    }
    if let Some(p) = policy.constant_p {
        return Ok(p);
    }
    let plateau = iter / policy.step * policy.step;
    let t = (plateau as f64 / policy.total_iters as f64).clamp(0.0, 1.0);
    // lerp in this form hits both endpoints exactly
    Ok(policy.p_start * (1.0 - t) + policy.p_end * t)
}

/// Cosine decay from `lr_max` at iteration 0 to `lr_min` at `total`.
pub fn cosine_lr(iter: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return arg_err("cosine schedule needs a positive length");
    }
    if iter > total {
        return arg_err(format!("iteration {iter} beyond schedule length {total}"));
    }
    let a = 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos());
    Ok(lr_max * a + lr_min * (1.0 - a))
}
