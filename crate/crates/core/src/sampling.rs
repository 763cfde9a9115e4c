//! Class-aware patch placement, patch extraction and intensity normalization.
//!
//! Two normalization regimes are provided. [`normalize_imagewise`] z-scores
//! each channel with statistics of the whole image, so a patch's intensity
//! distribution depends on where it was cut. [`normalize_patchwise`] z-scores
//! after extraction, which gives every network input zero mean and unit
//! variance; the sliding-window engine applies it to every tile as well.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::tensor::Tensor4D;
use crate::volume::{LabelMask, Volume3D};

/// Standard-deviation floor for z-scoring.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub size: [usize; 3],
    /// Share of patches forced to contain foreground.
    pub target_fraction: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: [320, 320, 64], target_fraction: 0.9 }
    }
}

impl PatchSpec {
    pub fn new(size: [usize; 3], target_fraction: f64) -> Result<Self> {
        let spec = Self { size, target_fraction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return arg_err(format!("patch size must be positive, got {:?}", self.size));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return arg_err(format!("target fraction {} outside [0, 1]", self.target_fraction));
        }
        Ok(())
    }

    /// Largest valid offset per axis; 0 where the volume is smaller than the patch.
    pub fn max_offset(&self, dims: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| dims[a].saturating_sub(self.size[a]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Placed so that it contains a chosen foreground voxel.
    Targeted,
    /// Placed uniformly over all valid offsets.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPosition {
    pub offset: [usize; 3],
    pub provenance: Provenance,
}

impl PatchPosition {
    pub fn random(offset: [usize; 3]) -> Self {
        Self { offset, provenance: Provenance::Random }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub offset: [usize; 3],
    pub data: Tensor4D,
    pub mask_patch: LabelMask,
    pub provenance: Provenance,
}

/// Chooses a patch corner.
///
/// With probability `target_fraction`, and only when the mask has foreground,
/// a foreground voxel is picked uniformly and the offset is drawn uniformly
/// among the valid offsets whose patch contains it. Otherwise the offset is
/// uniform over all valid offsets.
pub fn sample_patch_position<R: Rng + ?Sized>(mask: &LabelMask, spec: &PatchSpec, rng: &mut R) -> PatchPosition {
    let dims = mask.dims();
    let max_off = spec.max_offset(dims);
    let wants_target = rng.random::<f64>() < spec.target_fraction;
    if wants_target {
        let fg = mask.foreground_indices();
        if !fg.is_empty() {
            let voxel = mask.coords(fg[rng.random_range(0..fg.len())]);
            let offset = [0, 1, 2].map(|a| {
                let lo = (voxel[a] + 1).saturating_sub(spec.size[a]);
                let hi = voxel[a].min(max_off[a]);
                rng.random_range(lo..=hi)
            });
            return PatchPosition { offset, provenance: Provenance::Targeted };
        }
    }
    let offset = [0, 1, 2].map(|a| rng.random_range(0..=max_off[a]));
    PatchPosition::random(offset)
}

/// Copies the patch at `position`; regions past the volume are zero / background.
pub fn extract_patch(
    vol: &Volume3D,
    mask: &LabelMask,
    position: PatchPosition,
    spec: &PatchSpec,
) -> Result<PatchSample> {
    let dims = vol.dims();
    if mask.dims() != dims {
        return arg_err(format!("volume dims {dims:?} and mask dims {:?} differ", mask.dims()));
    }
    let max_off = spec.max_offset(dims);
    let offset = position.offset;
    if (0..3).any(|a| offset[a] > max_off[a]) {
        return arg_err(format!("patch offset {offset:?} exceeds the largest valid offset {max_off:?}"));
    }
    let size = spec.size;
    let inside = |a: usize, t: usize| offset[a] + t < dims[a];
    let data = Tensor4D::from_fn(vol.channels(), size, |c, x, y, z| {
        if inside(0, x) && inside(1, y) && inside(2, z) {
            vol.get(c, offset[0] + x, offset[1] + y, offset[2] + z)
        } else {
            0.0
        }
    });
    let mut labels = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let l = if inside(0, x) && inside(1, y) && inside(2, z) {
                    mask.get(offset[0] + x, offset[1] + y, offset[2] + z)
                } else {
                    0
                };
                labels.push(l);
            }
        }
    }
    Ok(PatchSample {
        offset,
        data,
        mask_patch: LabelMask::new(size, mask.spacing(), labels)?,
        provenance: position.provenance,
    })
}

/// Places and extracts a training patch in one step.
pub fn sample_patch<R: Rng + ?Sized>(
    vol: &Volume3D,
    mask: &LabelMask,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<PatchSample> {
    let pos = sample_patch_position(mask, spec, rng);
    extract_patch(vol, mask, pos, spec)
}

fn zscore_in_place(x: &mut [f32], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(eps);
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return arg_err(format!("normalization eps must be positive, got {eps}"));
    }
    Ok(())
}

/// Z-scores every channel not listed in `exempt_channels`, using this patch's
/// own statistics. A constant channel becomes all zeros.
pub fn normalize_patchwise(patch: &Tensor4D, exempt_channels: &[usize], eps: f64) -> Result<Tensor4D> {
    check_eps(eps)?;
    let mut out = patch.clone();
    for c in 0..patch.channels() {
        if !exempt_channels.contains(&c) {
            zscore_in_place(out.channel_mut(c), eps);
        }
    }
    Ok(out)
}

/// Z-scores each non-exempt channel with whole-image statistics.
pub fn normalize_imagewise(vol: &Volume3D, exempt_channels: &[usize], eps: f64) -> Result<Volume3D> {
    check_eps(eps)?;
    let mut t = vol.to_tensor();
    for c in 0..t.channels() {
        if !exempt_channels.contains(&c) {
            zscore_in_place(t.channel_mut(c), eps);
        }
    }
    Volume3D::from_tensor(t, vol.spacing(), crate::IntensityKind::Continuous)
}
