//! Restoration of blurred, noisy planar images by mean field annealing,
//! with the supporting measurement pipeline: PSF characterization from
//! point and line sources, flood-source noise estimation, a Wiener
//! baseline, sharpening and Sobel post-filters, quality metrics, and a
//! synthetic phantom harness.

pub mod baseline;
pub mod convolve;
pub mod error;
pub mod image;
pub mod metrics;
pub mod mfa;
pub mod phantom;
pub mod psf;

pub use error::{Error, Result};
pub use image::{ImageFormat, ImageGrid};
