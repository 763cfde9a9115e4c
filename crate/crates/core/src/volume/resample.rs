//! Grid-to-grid resampling in physical coordinates.
//!
//! Voxel `j` of a grid with spacing `s` is centred at `(j + 0.5) * s` mm.
//! Output positions are mapped into the input's continuous index space and
//! clamped to `[0, n - 1]`, so border voxels replicate outwards.

use rayon::prelude::*;

use super::{check_spacing, IntensityKind, LabelMask, Volume3D};
use crate::error::Result;

/// Output grid size when resampling `dims` at `spacing` to `target` spacing:
/// `ceil(dims * spacing / target)` per axis.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing[a] / target[a];
        // Slack absorbs rounding in ratios such as 0.3 / 0.1.
        out[a] = ((extent - 1e-9).ceil() as usize).max(1);
    }
    out
}

/// Continuous input index for output voxel `j`, clamped to the input domain.
#[inline]
fn source_coord(j: usize, out_spacing: f64, in_spacing: f64, n_in: usize) -> f64 {
    let u = (j as f64 + 0.5) * (out_spacing / in_spacing) - 0.5;
    u.clamp(0.0, (n_in - 1) as f64)
}

/// Nearest input index; exact half-way ties go to the lower index.
#[inline]
fn nearest_index(u: f64) -> usize {
    (u - 0.5).ceil().max(0.0) as usize
}

#[derive(Clone, Copy)]
struct LinearTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn linear_taps(n_out: usize, out_sp: f64, in_sp: f64, n_in: usize) -> Vec<LinearTap> {
    (0..n_out)
        .map(|j| {
            let u = source_coord(j, out_sp, in_sp, n_in);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            LinearTap { lo, hi, frac: u - lo as f64 }
        })
        .collect()
}

fn nearest_taps(n_out: usize, out_sp: f64, in_sp: f64, n_in: usize) -> Vec<usize> {
    (0..n_out).map(|j| nearest_index(source_coord(j, out_sp, in_sp, n_in))).collect()
}

/// Trilinear resampling of every channel to `target_spacing`.
pub fn resample_linear(vol: &Volume3D, target_spacing: [f64; 3]) -> Result<Volume3D> {
    check_spacing(target_spacing)?;
    let din = vol.dims();
    let sin = vol.spacing();
    let dout = resampled_dims(din, sin, target_spacing);
    let taps: Vec<Vec<LinearTap>> = (0..3)
        .map(|a| linear_taps(dout[a], target_spacing[a], sin[a], din[a]))
        .collect();
    let (tx, ty, tz) = (&taps[0], &taps[1], &taps[2]);

    let n_in = vol.voxels();
    let slice_out = dout[0] * dout[1];
    let mut data = vec![0f32; vol.channels() * slice_out * dout[2]];
    // One chunk per output (channel, z) slice.
    data.par_chunks_mut(slice_out).enumerate().for_each(|(cz, out)| {
        let c = cz / dout[2];
        let z = cz % dout[2];
        let src = &vol.data()[c * n_in..(c + 1) * n_in];
        let at = |x: usize, y: usize, z: usize| src[(z * din[1] + y) * din[0] + x] as f64;
        let wz = tz[z];
        for (y, wy) in ty.iter().enumerate() {
            for (x, wx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for (zi, fz) in [(wz.lo, 1.0 - wz.frac), (wz.hi, wz.frac)] {
                    if fz == 0.0 {
                        continue;
                    }
                    for (yi, fy) in [(wy.lo, 1.0 - wy.frac), (wy.hi, wy.frac)] {
                        if fy == 0.0 {
                            continue;
                        }
                        for (xi, fx) in [(wx.lo, 1.0 - wx.frac), (wx.hi, wx.frac)] {
                            if fx == 0.0 {
                                continue;
                            }
                            acc += fx * fy * fz * at(xi, yi, zi);
                        }
                    }
                }
                out[y * dout[0] + x] = acc as f32;
            }
        }
    });
    let kind = match vol.kind() {
        IntensityKind::Binary => IntensityKind::Continuous,
        k => k,
    };
    Volume3D::new(dout, vol.channels(), target_spacing, data, kind)
}

fn gather_nearest<T: Copy + Send + Sync>(
    src: &[T],
    din: [usize; 3],
    taps: [&[usize]; 3],
    channels: usize,
) -> Vec<T> {
    let dout = [taps[0].len(), taps[1].len(), taps[2].len()];
    let n_in = din.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * dout.iter().product::<usize>());
    for c in 0..channels {
        let src = &src[c * n_in..(c + 1) * n_in];
        for &zi in taps[2] {
            for &yi in taps[1] {
                let row = (zi * din[1] + yi) * din[0];
                out.extend(taps[0].iter().map(|&xi| src[row + xi]));
            }
        }
    }
    out
}

/// Nearest-neighbour resampling of a label mask to `target_spacing`.
pub fn resample_nearest(mask: &LabelMask, target_spacing: [f64; 3]) -> Result<LabelMask> {
    check_spacing(target_spacing)?;
    let dout = resampled_dims(mask.dims(), mask.spacing(), target_spacing);
    resample_mask_onto(mask, dout, target_spacing)
}

fn resample_mask_onto(mask: &LabelMask, dout: [usize; 3], spacing: [f64; 3]) -> Result<LabelMask> {
    let din = mask.dims();
    let sin = mask.spacing();
    let taps: Vec<Vec<usize>> = (0..3)
        .map(|a| nearest_taps(dout[a], spacing[a], sin[a], din[a]))
        .collect();
    let labels = gather_nearest(mask.labels(), din, [&taps[0], &taps[1], &taps[2]], 1);
    LabelMask::new(dout, spacing, labels)
}

/// Nearest-neighbour resampling of a volume; keeps binary channels binary.
pub fn resample_volume_nearest(vol: &Volume3D, target_spacing: [f64; 3]) -> Result<Volume3D> {
    check_spacing(target_spacing)?;
    let din = vol.dims();
    let sin = vol.spacing();
    let dout = resampled_dims(din, sin, target_spacing);
    let taps: Vec<Vec<usize>> = (0..3)
        .map(|a| nearest_taps(dout[a], target_spacing[a], sin[a], din[a]))
        .collect();
    let data = gather_nearest(vol.data(), din, [&taps[0], &taps[1], &taps[2]], vol.channels());
    Volume3D::new(dout, vol.channels(), target_spacing, data, vol.kind())
}

/// Maps a working-grid mask back onto `reference`'s grid (dims and spacing)
/// by nearest-neighbour lookup in physical coordinates.
pub fn restore_resolution(mask: &LabelMask, reference: &Volume3D) -> Result<LabelMask> {
    resample_mask_onto(mask, reference.dims(), reference.spacing())
}
