//! Image and label grids with physical voxel spacing, NIfTI-1 I/O and
//! resampling between voxel grids.

mod nifti;
mod resample;

pub use nifti::{read_nifti, read_nifti_mask, write_nifti, write_nifti_mask, Datatype, NiftiHeader};
pub use resample::{
    resample_linear, resample_nearest, resample_volume_nearest, resampled_dims, restore_resolution,
};

use crate::error::{arg_err, Result};
use crate::tensor::Tensor4D;

/// Whether a volume holds continuous intensities or a binary mask channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntensityKind {
    #[default]
    Continuous,
    Binary,
}

/// Highest label value a [`LabelMask`] may hold (background, GTVp, GTVn).
pub const MAX_LABEL: u8 = 2;

/// Class index of the primary tumor volume.
pub const GTVP: u8 = 1;
/// Class index of the nodal tumor volume.
pub const GTVN: u8 = 2;

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return arg_err(format!("spacing must be strictly positive and finite, got {spacing:?}"));
    }
    Ok(())
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return arg_err(format!("dims must be positive, got {dims:?}"));
    }
    Ok(())
}

/// Multi-channel scalar grid with physical voxel spacing in mm.
///
/// Data is channel-major with X varying fastest inside a channel, matching
/// [`Tensor4D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    channels: usize,
    spacing: [f64; 3],
    data: Vec<f32>,
    kind: IntensityKind,
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        spacing: [f64; 3],
        data: Vec<f32>,
        kind: IntensityKind,
    ) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if channels == 0 {
            return arg_err("volume needs at least one channel");
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return arg_err(format!("volume data length {} != {expected}", data.len()));
        }
        if kind == IntensityKind::Binary && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return arg_err("binary volume holds values outside {0, 1}");
        }
        Ok(Self { dims, channels, spacing, data, kind })
    }

    /// Single-channel continuous volume.
    pub fn scalar(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, 1, spacing, data, IntensityKind::Continuous)
    }

    pub fn from_tensor(tensor: Tensor4D, spacing: [f64; 3], kind: IntensityKind) -> Result<Self> {
        let dims = tensor.dims();
        let channels = tensor.channels();
        Self::new(dims, channels, spacing, tensor.into_data(), kind)
    }

    /// Stacks single- or multi-channel volumes on identical grids into one.
    ///
    /// The result is continuous unless every input is binary.
    pub fn stack(parts: &[Volume3D]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| crate::Error::Argument("nothing to stack".into()))?;
        for p in parts {
            if p.dims != first.dims {
                return arg_err(format!(
                    "cannot stack channels with dims {:?} and {:?}; resample to equal dims first",
                    first.dims, p.dims
                ));
            }
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let kind = if parts.iter().all(|p| p.kind == IntensityKind::Binary) {
            IntensityKind::Binary
        } else {
            IntensityKind::Continuous
        };
        Self::new(first.dims, channels, first.spacing, data, kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Extracts a single channel as its own volume.
    pub fn channel_volume(&self, c: usize) -> Volume3D {
        Volume3D {
            dims: self.dims,
            channels: 1,
            spacing: self.spacing,
            data: self.channel(c).to_vec(),
            kind: self.kind,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        let [nx, ny, nz] = self.dims;
        self.data[((c * nz + z) * ny + y) * nx + x]
    }

    pub fn to_tensor(&self) -> Tensor4D {
        Tensor4D::from_vec(self.channels, self.dims, self.data.clone()).expect("volume invariant")
    }

    pub fn into_tensor(self) -> Tensor4D {
        Tensor4D::from_vec(self.channels, self.dims, self.data).expect("volume invariant")
    }

    /// Same grid, new intensity kind; fails if marking non-binary data binary.
    pub fn with_kind(self, kind: IntensityKind) -> Result<Self> {
        Self::new(self.dims, self.channels, self.spacing, self.data, kind)
    }
}

/// Integer label grid over {0 = background, 1 = GTVp, 2 = GTVn}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if labels.len() != dims.iter().product::<usize>() {
            return arg_err(format!("mask length {} does not match dims {dims:?}", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return arg_err(format!("label {bad} outside {{0, 1, 2}}"));
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn background(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    /// Binary indicator (0/1 per voxel) for one class.
    pub fn binarize(&self, class: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l == class)).collect()
    }

    /// Flat indices of all non-background voxels.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l != 0).then_some(i))
            .collect()
    }

    /// Spatial coordinate of a flat index.
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn with_spacing(self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Self { spacing, ..self })
    }
}
