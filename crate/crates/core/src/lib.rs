//! Volumetric segmentation pipeline toolkit.
//!
//! The crate covers every computational stage of a patch-based 3D U-Net
//! segmentation workflow for MRI: NIfTI I/O and anisotropic resampling
//! ([`volume`]), the U-Net itself ([`network`]), class-aware patch sampling and
//! patch-wise normalization ([`sampling`]), scheduled augmentation
//! ([`augmentation`]), Gaussian-weighted sliding-window inference and model
//! ensembling ([`inference`]), and Dice-based metrics and loss ([`metrics`]).
//! The [`cli`] module backs the `voxseg` command-line tool.
//!
//! Training itself is not part of the crate; the loss gradient is provided so
//! that an external optimizer can drive the network.
//!
//! ```
//! use voxseg::inference::{gaussian_weight_kernel, tile_offsets, SlidingWindowConfig};
//!
//! let kernel = gaussian_weight_kernel([5, 5, 5], 0.1).unwrap();
//! assert_eq!(kernel.get(2, 2, 2), 1.0);
//!
//! let cfg = SlidingWindowConfig::new([4, 4, 4], [3, 3, 3]);
//! assert_eq!(tile_offsets([11, 4, 4], &cfg).len(), 4);
//! ```

pub mod augmentation;
pub mod cli;
mod error;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod sampling;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor4D;
pub use volume::{IntensityKind, LabelMask, Volume3D};

/// Seeded generator used everywhere randomness is drawn.
///
/// ChaCha is used rather than `StdRng` so that seeded results stay identical
/// across platforms and `rand` releases.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

// The guide in `book/` is compiled here so its snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
