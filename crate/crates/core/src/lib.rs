//! Successive subspace learning for 2-D image segmentation.
//!
//! The pipeline is feed-forward and trained without backpropagation:
//!
//! 1. [`cascade`] stacks Saab units ([`saab`]) with 2×2 max pooling between
//!    them, producing feature maps at several spatial scales.
//! 2. [`featsel`] ranks every channel by class-wise histogram entropy and
//!    keeps the most class-coherent fraction.
//! 3. [`gbdt`] classifies each pixel from the concatenated, upsampled
//!    channels, and [`crf`] refines the resulting probabilities with
//!    mean-field inference.
//!
//! Numerical kernels are generic over [`Scalar`] (`f32` or `f64`). The
//! trained pipeline ([`pipeline`], [`bundle`]) works in `f64` with model
//! parameters held at `f32` precision so that bundles round-trip exactly.

pub mod bundle;
pub mod cascade;
pub mod crf;
pub mod data;
pub mod eigen;
pub mod error;
pub mod featsel;
pub mod gbdt;
pub mod metrics;
pub mod pipeline;
pub mod saab;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, LabelMap, PatchMatrix};

/// Number of segmentation classes: background, RV, MYO, LV.
pub const NUM_CLASSES: usize = 4;

/// Scalar type used by the trained pipeline.
pub type Real = f64;

pub type FeatureMapF32 = tensor::FeatureMap<f32>;
pub type FeatureMapF64 = tensor::FeatureMap<f64>;
pub type PatchMatrixF32 = tensor::PatchMatrix<f32>;
pub type PatchMatrixF64 = tensor::PatchMatrix<f64>;
pub type SaabKernelBankF32 = saab::SaabKernelBank<f32>;
pub type SaabKernelBankF64 = saab::SaabKernelBank<f64>;
pub type CascadeModelF64 = cascade::CascadeModel<f64>;
pub type TreeEnsembleF64 = gbdt::TreeEnsemble<f64>;
