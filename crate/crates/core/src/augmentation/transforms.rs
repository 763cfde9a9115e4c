//! The individual patch transforms.
//!
//! Spatial transforms move image channels and the label patch together.
//! Intensity transforms leave the label patch and every channel listed in
//! `exempt` untouched.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result};
use crate::sampling::PatchSample;
use crate::tensor::Tensor4D;
use crate::volume::LabelMask;

/// Reverses voxel order along each axis flagged in `axes` (X, Y, Z).
pub fn mirror(patch: &PatchSample, axes: [bool; 3]) -> PatchSample {
    let [nx, ny, nz] = patch.data.dims();
    let src = |x: usize, y: usize, z: usize| {
        [
            if axes[0] { nx - 1 - x } else { x },
            if axes[1] { ny - 1 - y } else { y },
            if axes[2] { nz - 1 - z } else { z },
        ]
    };
    let data = Tensor4D::from_fn(patch.data.channels(), [nx, ny, nz], |c, x, y, z| {
        let [sx, sy, sz] = src(x, y, z);
        patch.data.get(c, sx, sy, sz)
    });
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let [sx, sy, sz] = src(x, y, z);
                labels.push(patch.mask_patch.get(sx, sy, sz));
            }
        }
    }
    let mask_patch = LabelMask::new([nx, ny, nz], patch.mask_patch.spacing(), labels).expect("permuted labels");
    PatchSample { data, mask_patch, ..patch.clone() }
}

// Sample positions this close outside the grid still count as inside, so that
// rotations by multiples of 90 degrees keep their border voxels.
const EDGE_TOL: f64 = 1e-6;

/// In-plane rotation by `angle_deg` (counter-clockwise, X towards Y) about the
/// patch centre. Image channels are resampled bilinearly, exempt channels and
/// the label patch by nearest neighbour; samples from outside the patch are
/// zero / background.
pub fn rotate_z(patch: &PatchSample, angle_deg: f64, exempt: &[usize]) -> Result<PatchSample> {
    if !angle_deg.is_finite() {
        return arg_err(format!("rotation angle must be finite, got {angle_deg}"));
    }
    let [nx, ny, nz] = patch.data.dims();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let source = |x: usize, y: usize| -> Option<(f64, f64)> {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cx + cos * dx + sin * dy;
        let sy = cy - sin * dx + cos * dy;
        let inside = |v: f64, n: usize| v >= -EDGE_TOL && v <= (n - 1) as f64 + EDGE_TOL;
        (inside(sx, nx) && inside(sy, ny))
            .then(|| (sx.clamp(0.0, (nx - 1) as f64), sy.clamp(0.0, (ny - 1) as f64)))
    };
    let bilinear = |c: usize, z: usize, sx: f64, sy: f64| -> f32 {
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let mut acc = 0.0f64;
        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * patch.data.get(c, xx, yy, z) as f64;
            }
        }
        acc as f32
    };
    let nearest = |sx: f64, sy: f64| (sx.round() as usize, sy.round() as usize);
    let data = Tensor4D::from_fn(patch.data.channels(), [nx, ny, nz], |c, x, y, z| match source(x, y) {
        None => 0.0,
        Some((sx, sy)) if exempt.contains(&c) => {
            let (ix, iy) = nearest(sx, sy);
            patch.data.get(c, ix, iy, z)
        }
        Some((sx, sy)) => bilinear(c, z, sx, sy),
    });
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                labels.push(source(x, y).map_or(0, |(sx, sy)| {
                    let (ix, iy) = nearest(sx, sy);
                    patch.mask_patch.get(ix, iy, z)
                }));
            }
        }
    }
    let mask_patch = LabelMask::new([nx, ny, nz], patch.mask_patch.spacing(), labels)?;
    Ok(PatchSample { data, mask_patch, ..patch.clone() })
}

fn map_intensity_channels(
    patch: &PatchSample,
    exempt: &[usize],
    mut f: impl FnMut(usize, &mut [f32]),
) -> PatchSample {
    let mut out = patch.clone();
    for c in 0..out.data.channels() {
        if !exempt.contains(&c) {
            f(c, out.data.channel_mut(c));
        }
    }
    out
}

/// Gamma curve on min-max rescaled intensities, mapped back to the original range.
pub fn adjust_contrast(patch: &PatchSample, gamma: f64, exempt: &[usize]) -> Result<PatchSample> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return arg_err(format!("contrast gamma must be positive, got {gamma}"));
    }
    if gamma == 1.0 {
        return Ok(patch.clone());
    }
    Ok(map_intensity_channels(patch, exempt, |_, x| {
        let lo = x.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let range = hi - lo;
        if range <= 0.0 {
            return;
        }
        for v in x.iter_mut() {
            let t = (*v as f64 - lo) / range;
            *v = (lo + t.signum() * t.abs().powf(gamma) * range) as f32;
        }
    }))
}

/// Smooth multiplicative field `1 + sum c_ijk x^i y^j z^k` over normalized
/// coordinates in `[-1, 1]`, clamped to `amplitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub order: usize,
    /// One coefficient per monomial, in [`BiasField::monomials`] order.
    pub coeffs: Vec<f64>,
    pub amplitude: (f64, f64),
}

impl BiasField {
    /// Exponents `(i, j, k)` with `i + j + k <= order`, lexicographic.
    pub fn monomials(order: usize) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for i in 0..=order {
            for j in 0..=order - i {
                for k in 0..=order - i - j {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    pub fn zero(order: usize, amplitude: (f64, f64)) -> Self {
        Self { order, coeffs: vec![0.0; Self::monomials(order).len()], amplitude }
    }

    fn validate(&self) -> Result<()> {
        let n = Self::monomials(self.order).len();
        if self.coeffs.len() != n {
            return arg_err(format!(
                "order-{} bias field needs {n} coefficients, got {}",
                self.order,
                self.coeffs.len()
            ));
        }
        let (lo, hi) = self.amplitude;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return arg_err(format!("bias amplitude range ({lo}, {hi}) must bracket 1"));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return arg_err("bias field coefficients must be finite");
        }
        Ok(())
    }

    /// Field value at normalized coordinates.
    pub fn value(&self, u: [f64; 3]) -> f64 {
        let raw = 1.0
            + Self::monomials(self.order)
                .iter()
                .zip(&self.coeffs)
                .map(|([i, j, k], c)| c * u[0].powi(*i as i32) * u[1].powi(*j as i32) * u[2].powi(*k as i32))
                .sum::<f64>();
        raw.clamp(self.amplitude.0, self.amplitude.1)
    }
}

fn normalized_coord(t: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * t as f64 / (n - 1) as f64
    }
}

pub fn apply_bias_field(patch: &PatchSample, field: &BiasField, exempt: &[usize]) -> Result<PatchSample> {
    field.validate()?;
    let dims = patch.data.dims();
    let [nx, ny, nz] = dims;
    let mut values = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let u = [normalized_coord(x, nx), normalized_coord(y, ny), normalized_coord(z, nz)];
                values.push(field.value(u));
            }
        }
    }
    Ok(map_intensity_channels(patch, exempt, |_, x| {
        for (v, f) in x.iter_mut().zip(&values) {
            *v = (*v as f64 * f) as f32;
        }
    }))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every non-exempt voxel.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    patch: &PatchSample,
    sigma: f64,
    exempt: &[usize],
    rng: &mut R,
) -> Result<PatchSample> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return arg_err(format!("noise sigma must be non-negative, got {sigma}"));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok(map_intensity_channels(patch, exempt, |_, x| {
        for v in x.iter_mut() {
            *v = (*v as f64 + normal.sample(rng)) as f32;
        }
    }))
}

/// Blends a copy of the image rolled by `shift` voxels along Y (the
/// phase-encode axis) into the image: `(1 - w) x + w roll(x)`. The label patch
/// is not changed.
pub fn apply_motion_ghost(patch: &PatchSample, shift: usize, weight: f64, exempt: &[usize]) -> Result<PatchSample> {
    if !(0.0..=1.0).contains(&weight) {
        return arg_err(format!("ghost weight must lie in [0, 1], got {weight}"));
    }
    let [nx, ny, nz] = patch.data.dims();
    let shift = shift % ny;
    Ok(map_intensity_channels(patch, exempt, |_, x| {
        let orig = x.to_vec();
        for z in 0..nz {
            for y in 0..ny {
                let sy = (y + ny - shift) % ny;
                for xx in 0..nx {
                    let i = (z * ny + y) * nx + xx;
                    let g = orig[(z * ny + sy) * nx + xx] as f64;
                    x[i] = ((1.0 - weight) * orig[i] as f64 + weight * g) as f32;
                }
            }
        }
    }))
}
