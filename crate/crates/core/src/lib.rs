//! Staged, region-selective guided diffusion sampling for restoring damaged
//! face photographs.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

pub mod color;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod regions;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod selftest;
pub mod table;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;
pub use tensor::{BinaryMask, ImageTensor, ParsingMap};

/// Double-precision image, the default working type.
pub type Image = ImageTensor<f64>;
/// Single-precision image, matching the on-disk and on-wire formats.
pub type Image32 = ImageTensor<f32>;
pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Schedule32 = schedule::NoiseSchedule<f32>;
pub type GaussianModel = denoiser::DiagonalGaussianModel<f64>;
pub type MixtureModel = denoiser::GaussianMixtureModel<f64>;
