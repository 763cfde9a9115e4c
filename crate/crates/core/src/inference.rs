//! Sliding-window prediction, ensembling and label extraction.
//!
//! A volume is covered by overlapping patches placed at multiples of the
//! stride, plus one patch flush with the far edge where the last step would
//! overshoot. Each patch is z-scored on its own, passed through a
//! [`Predictor`], and its probabilities are blended into the output with a
//! weight kernel: either uniform, or a separable Gaussian that is 1 at the
//! patch centre and falls to `gaussian_edge_value` at each face.
//!
//! Blending divides a weighted sum of probabilities by the summed weights, so
//! a global rescaling of the kernel has no effect and the output stays a
//! probability distribution at every voxel.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::network::Model;
use crate::sampling::{normalize_patchwise, NORM_EPS};
use crate::tensor::Tensor4D;
use crate::volume::{IntensityKind, LabelMask, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    Equal,
    #[default]
    Gaussian,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "equal" => Ok(Self::Equal),
            "gaussian" => Ok(Self::Gaussian),
            other => arg_err(format!("unknown weighting `{other}` (expected equal or gaussian)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub weighting: Weighting,
    /// Gaussian weight at the centre of each patch face.
    pub gaussian_edge_value: f64,
    /// Channels passed to the predictor without normalization.
    pub exempt_channels: Vec<usize>,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self::new([320, 320, 64], [80, 80, 16])
    }
}

impl SlidingWindowConfig {
    /// Gaussian weighting with edge value 0.1 and no exempt channels.
    pub fn new(patch_size: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            patch_size,
            stride,
            weighting: Weighting::Gaussian,
            gaussian_edge_value: 0.1,
            exempt_channels: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.patch_size[a] {
                return arg_err(format!(
                    "stride {:?} must be positive and no larger than patch {:?}",
                    self.stride, self.patch_size
                ));
            }
        }
        check_edge(self.gaussian_edge_value)
    }

    pub fn kernel(&self) -> Result<WeightKernel> {
        match self.weighting {
            Weighting::Equal => Ok(equal_weight_kernel(self.patch_size)),
            Weighting::Gaussian => gaussian_weight_kernel(self.patch_size, self.gaussian_edge_value),
        }
    }
}

fn check_edge(edge: f64) -> Result<()> {
    if !(edge > 0.0 && edge < 1.0) {
        return arg_err(format!("gaussian edge value must lie in (0, 1), got {edge}"));
    }
    Ok(())
}

/// Separable patch weights, stored as one profile per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightKernel {
    profiles: [Vec<f64>; 3],
}

impl WeightKernel {
    pub fn size(&self) -> [usize; 3] {
        [self.profiles[0].len(), self.profiles[1].len(), self.profiles[2].len()]
    }

    pub fn profile(&self, axis: usize) -> &[f64] {
        &self.profiles[axis]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.profiles[0][x] * self.profiles[1][y] * self.profiles[2][z]
    }

    /// Dense weights, X fastest.
    pub fn to_dense(&self) -> Vec<f64> {
        let [nx, ny, nz] = self.size();
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.get(x, y, z));
                }
            }
        }
        out
    }
}

/// Product of per-axis Gaussians centred on the patch, each equal to
/// `edge_value` at the first and last voxel of its axis. Axes of length 1 are
/// flat.
pub fn gaussian_weight_kernel(size: [usize; 3], edge_value: f64) -> Result<WeightKernel> {
    check_edge(edge_value)?;
    if size.contains(&0) {
        return arg_err(format!("kernel size must be positive, got {size:?}"));
    }
    let k = 2.0 * (1.0 / edge_value).ln();
    let profiles = size.map(|n| {
        let c = (n as f64 - 1.0) / 2.0;
        if n == 1 {
            return vec![1.0];
        }
        // exp(-(t-c)^2 / (2 sigma^2)) with sigma = c / sqrt(k)
        (0..n).map(|t| (-(t as f64 - c).powi(2) * k / (2.0 * c * c)).exp()).collect()
    });
    Ok(WeightKernel { profiles })
}

pub fn equal_weight_kernel(size: [usize; 3]) -> WeightKernel {
    WeightKernel { profiles: size.map(|n| vec![1.0; n]) }
}

fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch <= len).collect();
    if *v.last().unwrap() + patch < len {
        v.push(len - patch);
    }
    v
}

/// Patch offsets covering a volume, Z outermost and X innermost. Axes shorter
/// than the patch get the single offset 0 (the volume is padded to the patch).
pub fn tile_offsets(dims: [usize; 3], config: &SlidingWindowConfig) -> Vec<[usize; 3]> {
    let per_axis: Vec<Vec<usize>> =
        (0..3).map(|a| axis_offsets(dims[a], config.patch_size[a], config.stride[a].max(1))).collect();
    let mut out = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Maps a normalized patch to per-class probabilities of the same spatial size.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn predict(&self, patch: &Tensor4D) -> Result<Tensor4D>;
}

impl Predictor for Model {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict(&self, patch: &Tensor4D) -> Result<Tensor4D> {
        self.forward(patch)
    }
}

/// Weighted running sums of patch predictions over a volume.
#[derive(Debug, Clone)]
pub struct SlidingWindowAccumulator {
    channels: usize,
    dims: [usize; 3],
    numerator: Vec<f64>,
    denominator: Vec<f64>,
}

impl SlidingWindowAccumulator {
    pub fn new(channels: usize, dims: [usize; 3]) -> Self {
        let n = dims.iter().product::<usize>();
        Self { channels, dims, numerator: vec![0.0; channels * n], denominator: vec![0.0; n] }
    }

    /// Adds `probs` (sized like `kernel`) at `offset`.
    pub fn add(&mut self, offset: [usize; 3], probs: &Tensor4D, kernel: &WeightKernel) -> Result<()> {
        let size = kernel.size();
        if probs.dims() != size || probs.channels() != self.channels {
            return Err(Error::Contract(format!(
                "patch prediction has shape {:?}, expected {:?}",
                probs.shape(),
                [self.channels, size[0], size[1], size[2]]
            )));
        }
        if (0..3).any(|a| offset[a] + size[a] > self.dims[a]) {
            return arg_err(format!("patch at {offset:?} leaves the {:?} grid", self.dims));
        }
        let [nx, ny, _] = self.dims;
        let n = self.denominator.len();
        let (kx, ky, kz) = (kernel.profile(0), kernel.profile(1), kernel.profile(2));
        for z in 0..size[2] {
            for y in 0..size[1] {
                let wyz = ky[y] * kz[z];
                let row = ((offset[2] + z) * ny + offset[1] + y) * nx + offset[0];
                for x in 0..size[0] {
                    let w = kx[x] * wyz;
                    self.denominator[row + x] += w;
                    for c in 0..self.channels {
                        self.numerator[c * n + row + x] += w * probs.get(c, x, y, z) as f64;
                    }
                }
            }
        }
        Ok(())
    }

    /// Smallest accumulated weight; positive when every voxel is covered.
    pub fn min_weight(&self) -> f64 {
        self.denominator.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Weighted average of everything added.
    pub fn finish(&self) -> Result<Tensor4D> {
        if !(self.min_weight() > 0.0) {
            return Err(Error::Contract("sliding window left voxels uncovered".into()));
        }
        let n = self.denominator.len();
        let data = self
            .numerator
            .iter()
            .enumerate()
            .map(|(i, &num)| (num / self.denominator[i % n]) as f32)
            .collect();
        Tensor4D::from_vec(self.channels, self.dims, data)
    }
}

fn extract(src: &Tensor4D, offset: [usize; 3], size: [usize; 3]) -> Tensor4D {
    Tensor4D::from_fn(src.channels(), size, |c, x, y, z| src.get(c, offset[0] + x, offset[1] + y, offset[2] + z))
}

/// Predicts a whole volume patch by patch.
///
/// The volume is zero-padded at the far end of any axis shorter than the patch
/// and cropped back afterwards. Patches are predicted in parallel but blended
/// in [`tile_offsets`] order, so the result does not depend on thread count.
pub fn sliding_window_predict<P: Predictor + ?Sized>(
    vol: &Volume3D,
    predictor: &P,
    config: &SlidingWindowConfig,
) -> Result<Volume3D> {
    config.validate()?;
    let kernel = config.kernel()?;
    let dims = vol.dims();
    let padded_dims: [usize; 3] = std::array::from_fn(|a| dims[a].max(config.patch_size[a]));
    let src = vol.to_tensor();
    let padded = if padded_dims == dims {
        src
    } else {
        Tensor4D::from_fn(vol.channels(), padded_dims, |c, x, y, z| {
            if x < dims[0] && y < dims[1] && z < dims[2] { src.get(c, x, y, z) } else { 0.0 }
        })
    };
    let offsets = tile_offsets(padded_dims, config);
    let classes = predictor.num_classes();
    let mut acc = SlidingWindowAccumulator::new(classes, padded_dims);
    let batch = rayon::current_num_threads().max(1);
    for chunk in offsets.chunks(batch) {
        let preds: Vec<Result<Tensor4D>> = chunk
            .par_iter()
            .map(|&o| {
                let patch = normalize_patchwise(&extract(&padded, o, config.patch_size), &config.exempt_channels, NORM_EPS)?;
                predictor.predict(&patch)
            })
            .collect();
        for (&o, p) in chunk.iter().zip(preds) {
            acc.add(o, &p?, &kernel)?;
        }
    }
    let full = acc.finish()?;
    let out = if padded_dims == dims { full } else { extract(&full, [0; 3], dims) };
    Volume3D::from_tensor(out, vol.spacing(), IntensityKind::Continuous)
}

/// Voxel-wise mean of several probability volumes.
pub fn ensemble_predict(prob_volumes: &[Volume3D]) -> Result<Volume3D> {
    let Some(first) = prob_volumes.first() else {
        return arg_err("ensemble needs at least one prediction");
    };
    for (i, v) in prob_volumes.iter().enumerate() {
        if v.dims() != first.dims() || v.channels() != first.channels() {
            return arg_err(format!(
                "prediction {i} has {} channels of {:?}, expected {} of {:?}",
                v.channels(),
                v.dims(),
                first.channels(),
                first.dims()
            ));
        }
    }
    let k = prob_volumes.len() as f64;
    let data = (0..first.data().len())
        .map(|i| (prob_volumes.iter().map(|v| v.data()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    Volume3D::new(first.dims(), first.channels(), first.spacing(), data, IntensityKind::Continuous)
}

/// Index of the largest channel per voxel; ties go to the lower index.
pub fn argmax_labels(probs: &Volume3D) -> Result<LabelMask> {
    let c = probs.channels();
    if c > crate::volume::MAX_LABEL as usize + 1 {
        return arg_err(format!("expected at most 3 class channels, got {c}"));
    }
    let n = probs.voxels();
    let data = probs.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if data[k * n + i] > data[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(probs.dims(), probs.spacing(), labels)
}
