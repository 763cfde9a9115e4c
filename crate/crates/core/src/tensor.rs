//! Dense channels-first 4D arrays.

use crate::error::{arg_err, Result};

/// Channels-first dense array of shape `(C, X, Y, Z)`.
///
/// Storage is channel-major; within a channel X varies fastest, then Y, then
/// Z. This is the same layout as [`Volume3D`](crate::Volume3D), so converting
/// between the two is a move.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f32) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self { channels, dims, data: vec![value; n] }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return arg_err(format!(
                "tensor data length {} does not match shape ({channels}, {}, {}, {}) = {expected}",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            ));
        }
        Ok(Self { channels, dims, data })
    }

    /// Builds a tensor by evaluating `f(c, x, y, z)` at every element.
    pub fn from_fn(
        channels: usize,
        dims: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for c in 0..channels {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        data.push(f(c, x, y, z));
                    }
                }
            }
        }
        Self { channels, dims, data }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial dims `(X, Y, Z)`.
    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// `(C, X, Y, Z)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.dims[0], self.dims[1], self.dims[2]]
    }

    /// Voxels per channel.
    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &Tensor4D) -> Result<Tensor4D> {
        if self.dims != other.dims {
            return arg_err(format!(
                "cannot concatenate tensors with spatial dims {:?} and {:?}",
                self.dims, other.dims
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor4D { channels: self.channels + other.channels, dims: self.dims, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
