//! Scheduled data augmentation.
//!
//! Each transform in the policy is drawn independently with the same
//! probability. Under the scheduled policy that probability rises linearly
//! from 0.05 to 0.25 over training in 1000-iteration plateaus, so more
//! augmented examples are produced late in training; the baseline policy
//! keeps it constant at 0.15.

mod schedule;
mod transforms;

pub use schedule::{cosine_lr, scheduled_probability, DEFAULT_LR_MAX, DEFAULT_LR_MIN};
pub use transforms::{
    add_gaussian_noise, adjust_contrast, apply_bias_field, apply_motion_ghost, mirror, rotate_z, BiasField,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::sampling::PatchSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Mirror,
    Rotate,
    Contrast,
    BiasField,
    Noise,
    Motion,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        Self::Mirror,
        Self::Rotate,
        Self::Contrast,
        Self::BiasField,
        Self::Noise,
        Self::Motion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mirror => "mirror",
            Self::Rotate => "rotate",
            Self::Contrast => "contrast",
            Self::BiasField => "bias_field",
            Self::Noise => "noise",
            Self::Motion => "motion",
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown transform `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub p_start: f64,
    pub p_end: f64,
    pub total_iters: u64,
    /// Plateau length in iterations.
    pub step: u64,
    /// Overrides the ramp with a fixed probability (baseline mode).
    pub constant_p: Option<f64>,
    /// Applied in this order.
    pub transforms: Vec<TransformKind>,
}

impl AugmentationPolicy {
    /// Linear 0.05 → 0.25 ramp with 1000-iteration plateaus.
    pub fn scheduled(total_iters: u64) -> Self {
        Self {
            p_start: 0.05,
            p_end: 0.25,
            total_iters,
            step: 1000,
            constant_p: None,
            transforms: TransformKind::ALL.to_vec(),
        }
    }

    pub fn constant(total_iters: u64, p: f64) -> Self {
        Self { constant_p: Some(p), ..Self::scheduled(total_iters) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_start && self.p_start <= self.p_end && self.p_end <= 1.0) {
            return arg_err(format!(
                "need 0 <= p_start <= p_end <= 1, got {} and {}",
                self.p_start, self.p_end
            ));
        }
        if self.step == 0 || self.total_iters == 0 {
            return arg_err("schedule step and length must be positive");
        }
        if let Some(p) = self.constant_p {
            if !(0.0..=1.0).contains(&p) {
                return arg_err(format!("constant probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Ranges the random transform parameters are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    /// Axes (X, Y, Z) that may be mirrored; each is flipped with probability 1/2.
    pub mirror_axes: [bool; 3],
    /// Rotation angle is uniform in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub gamma_range: (f64, f64),
    pub bias_order: usize,
    pub bias_amplitude: (f64, f64),
    /// Each bias coefficient is uniform in `±bias_coefficient`.
    pub bias_coefficient: f64,
    pub noise_sigma: (f64, f64),
    pub ghost_shift: (usize, usize),
    pub ghost_weight: (f64, f64),
    /// Channels excluded from intensity transforms (binary mask inputs).
    pub exempt_channels: Vec<usize>,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            mirror_axes: [true, true, true],
            max_rotation_deg: 15.0,
            gamma_range: (0.7, 1.5),
            bias_order: 3,
            bias_amplitude: (0.9, 1.1),
            bias_coefficient: 0.05,
            noise_sigma: (0.0, 0.1),
            ghost_shift: (1, 4),
            ghost_weight: (0.05, 0.2),
            exempt_channels: Vec::new(),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return arg_err(format!("{name} range ({lo}, {hi}) must be ordered within [{min}, {max}]"));
    }
    Ok(())
}

impl TransformParams {
    pub fn validate(&self) -> Result<()> {
        check_range("rotation", (0.0, self.max_rotation_deg), 0.0, 180.0)?;
        check_range("gamma", self.gamma_range, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("bias amplitude", self.bias_amplitude, f64::MIN_POSITIVE, f64::MAX)?;
        if self.bias_amplitude.0 > 1.0 || self.bias_amplitude.1 < 1.0 {
            return arg_err("bias amplitude range must contain 1");
        }
        check_range("bias coefficient", (0.0, self.bias_coefficient), 0.0, f64::MAX)?;
        check_range("noise sigma", self.noise_sigma, 0.0, f64::MAX)?;
        check_range("ghost weight", self.ghost_weight, 0.0, 1.0)?;
        let (s0, s1) = self.ghost_shift;
        if s0 == 0 || s0 > s1 {
            return arg_err(format!("ghost shift range ({s0}, {s1}) must be ordered and start at 1 or more"));
        }
        Ok(())
    }
}

/// A transform that was drawn, with the parameters it was applied with.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedTransform {
    Mirror { axes: [bool; 3] },
    Rotate { angle_deg: f64 },
    Contrast { gamma: f64 },
    BiasField { coeffs: Vec<f64> },
    Noise { sigma: f64 },
    Motion { shift: usize, weight: f64 },
}

impl fmt::Display for AppliedTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mirror { axes } => {
                let names: Vec<&str> = ["x", "y", "z"].iter().zip(axes).filter(|(_, &a)| a).map(|(n, _)| *n).collect();
                write!(f, "mirror axes=[{}]", names.join(","))
            }
            Self::Rotate { angle_deg } => write!(f, "rotate angle_deg={angle_deg:.4}"),
            Self::Contrast { gamma } => write!(f, "contrast gamma={gamma:.4}"),
            Self::BiasField { coeffs } => {
                let c: Vec<String> = coeffs.iter().map(|c| format!("{c:.4}")).collect();
                write!(f, "bias_field coeffs=[{}]", c.join(","))
            }
            Self::Noise { sigma } => write!(f, "noise sigma={sigma:.4}"),
            Self::Motion { shift, weight } => write!(f, "motion shift={shift} weight={weight:.4}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub patch: PatchSample,
    /// Per-transform probability used for the draws.
    pub probability: f64,
    pub applied: Vec<AppliedTransform>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..=hi) }
}

/// Draws and applies the policy's transforms at training iteration `iter`.
///
/// For each transform in policy order one uniform number decides whether it
/// fires; its parameters are drawn only if it does. The result depends only on
/// the inputs and the generator state.
pub fn apply_augmentations<R: Rng + ?Sized>(
    patch: &PatchSample,
    params: &TransformParams,
    policy: &AugmentationPolicy,
    iter: u64,
    rng: &mut R,
) -> Result<Augmented> {
    params.validate()?;
    let p = scheduled_probability(iter, policy)?;
    let exempt = &params.exempt_channels;
    let mut cur = patch.clone();
    let mut applied = Vec::new();
    for &kind in &policy.transforms {
        if rng.random::<f64>() >= p {
            continue;
        }
        let t = match kind {
            TransformKind::Mirror => {
                let axes = params.mirror_axes.map(|allowed| allowed && rng.random_bool(0.5));
                cur = mirror(&cur, axes);
                AppliedTransform::Mirror { axes }
            }
            TransformKind::Rotate => {
                let m = params.max_rotation_deg;
                let angle_deg = uniform(rng, (-m, m));
                cur = rotate_z(&cur, angle_deg, exempt)?;
                AppliedTransform::Rotate { angle_deg }
            }
            TransformKind::Contrast => {
                let gamma = uniform(rng, params.gamma_range);
                cur = adjust_contrast(&cur, gamma, exempt)?;
                AppliedTransform::Contrast { gamma }
            }
            TransformKind::BiasField => {
                let c = params.bias_coefficient;
                let n = BiasField::monomials(params.bias_order).len();
                let coeffs: Vec<f64> = (0..n).map(|_| uniform(rng, (-c, c))).collect();
                let field = BiasField { order: params.bias_order, coeffs: coeffs.clone(), amplitude: params.bias_amplitude };
                cur = apply_bias_field(&cur, &field, exempt)?;
                AppliedTransform::BiasField { coeffs }
            }
            TransformKind::Noise => {
                let sigma = uniform(rng, params.noise_sigma);
                cur = add_gaussian_noise(&cur, sigma, exempt, rng)?;
                AppliedTransform::Noise { sigma }
            }
            TransformKind::Motion => {
                let (s0, s1) = params.ghost_shift;
                let shift = rng.random_range(s0..=s1);
                let weight = uniform(rng, params.ghost_weight);
                cur = apply_motion_ghost(&cur, shift, weight, exempt)?;
                AppliedTransform::Motion { shift, weight }
            }
        };
        applied.push(t);
    }
    Ok(Augmented { patch: cur, probability: p, applied })
}

#[cfg(test)]
mod tests {
    use super::transforms::tests::random_patch;
    use super::*;

    fn bits(p: &PatchSample) -> Vec<u32> {
        p.data.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn zero_probability_is_a_no_op() {
        let p = random_patch([6, 6, 4], 2, 1);
        let policy = AugmentationPolicy::constant(1000, 0.0);
        let mut rng = crate::seeded_rng(2);
        let out = apply_augmentations(&p, &TransformParams::default(), &policy, 10, &mut rng).unwrap();
        assert!(out.applied.is_empty());
        assert_eq!(bits(&out.patch), bits(&p));
        assert_eq!(out.patch.mask_patch, p.mask_patch);
    }

    #[test]
    fn mirror_only_applied_twice_with_same_draw_restores_patch() {
        let p = random_patch([5, 4, 3], 1, 3);
        let policy = AugmentationPolicy { transforms: vec![TransformKind::Mirror], ..AugmentationPolicy::constant(10, 1.0) };
        let params = TransformParams::default();
        let once = apply_augmentations(&p, &params, &policy, 0, &mut crate::seeded_rng(4)).unwrap();
        let twice = apply_augmentations(&once.patch, &params, &policy, 0, &mut crate::seeded_rng(4)).unwrap();
        assert_eq!(once.applied, twice.applied);
        assert_eq!(bits(&twice.patch), bits(&p));
        assert_eq!(twice.patch.mask_patch, p.mask_patch);
    }

    #[test]
    fn fixed_seed_replays_exactly() {
        let p = random_patch([8, 8, 4], 4, 5);
        let policy = AugmentationPolicy::constant(10, 1.0);
        let params = TransformParams { exempt_channels: vec![2, 3], ..TransformParams::default() };
        let a = apply_augmentations(&p, &params, &policy, 3, &mut crate::seeded_rng(6)).unwrap();
        let b = apply_augmentations(&p, &params, &policy, 3, &mut crate::seeded_rng(6)).unwrap();
        assert_eq!(a.applied.len(), 6);
        assert_eq!(bits(&a.patch), bits(&b.patch));
        assert_eq!(a.applied, b.applied);
        assert!(a.patch.mask_patch.labels().iter().all(|&l| l <= 2));
    }

    #[test]
    fn exempt_channels_only_move_spatially() {
        let mut p = random_patch([6, 6, 2], 2, 7);
        for v in p.data.channel_mut(1) {
            *v = if *v > 0.0 { 1.0 } else { 0.0 };
        }
        let policy = AugmentationPolicy::constant(10, 1.0);
        let params = TransformParams { exempt_channels: vec![1], ..TransformParams::default() };
        for seed in 0..20 {
            let out = apply_augmentations(&p, &params, &policy, 0, &mut crate::seeded_rng(seed)).unwrap();
            assert!(out.patch.data.channel(1).iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn invalid_configuration_is_rejected() {
        let p = random_patch([4, 4, 4], 1, 8);
        let mut rng = crate::seeded_rng(0);
        let bad_policy = AugmentationPolicy { p_start: 0.3, ..AugmentationPolicy::scheduled(100) };
        assert!(apply_augmentations(&p, &TransformParams::default(), &bad_policy, 0, &mut rng).is_err());
        let bad_params = TransformParams { gamma_range: (1.5, 0.7), ..TransformParams::default() };
        let policy = AugmentationPolicy::scheduled(100);
        assert!(apply_augmentations(&p, &bad_params, &policy, 0, &mut rng).is_err());
        assert!(apply_augmentations(&p, &TransformParams::default(), &policy, 101, &mut rng).is_err());
    }

    #[test]
    fn transform_names_parse() {
        for k in TransformKind::ALL {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
        }
        assert!("elastic".parse::<TransformKind>().is_err());
    }
}
