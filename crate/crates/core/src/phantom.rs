//! Synthetic piecewise-constant phantoms and the forward degradation
//! model, so restoration experiments run with a known ground truth.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::Deserialize;

use crate::convolve::{convolve2d, BoundaryPolicy};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::mfa::NoiseModel;
use crate::psf::Psf;

/// A shape painted onto the phantom; later shapes overwrite earlier ones.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    /// Filled disk: pixels with `(col-cx)^2 + (row-cy)^2 <= radius^2`.
    Disk {
        cx: f64,
        cy: f64,
        radius: f64,
        intensity: f64,
    },
    /// Filled axis-aligned rectangle covering `width x height` pixels
    /// from the top-left pixel `(x, y)`.
    Rect {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        intensity: f64,
    },
}

/// Declarative phantom description, readable from TOML.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    #[serde(default)]
    pub shapes: Vec<Shape>,
}

impl PhantomSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Domain(format!("phantom spec: {e}")))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("phantom dimensions must be positive".into()));
        }
        if !(self.background.is_finite() && self.background >= 0.0) {
            return Err(Error::Domain(format!(
                "background must be finite and non-negative, got {}",
                self.background
            )));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            match *shape {
                Shape::Disk { cx, cy, radius, intensity } => {
                    if !(cx.is_finite() && cy.is_finite() && radius.is_finite() && radius >= 0.0) {
                        return Err(Error::Domain(format!("shape {i}: bad disk geometry")));
                    }
                    if !(intensity.is_finite() && intensity >= 0.0) {
                        return Err(Error::Domain(format!("shape {i}: bad intensity")));
                    }
                    let inside = cx - radius >= 0.0
                        && cy - radius >= 0.0
                        && cx + radius <= (self.width - 1) as f64
                        && cy + radius <= (self.height - 1) as f64;
                    if !inside {
                        return Err(Error::Domain(format!("shape {i}: disk leaves the image bounds")));
                    }
                }
                Shape::Rect { x, y, width, height, intensity } => {
                    if width == 0 || height == 0 {
                        return Err(Error::Domain(format!("shape {i}: empty rectangle")));
                    }
                    if !(intensity.is_finite() && intensity >= 0.0) {
                        return Err(Error::Domain(format!("shape {i}: bad intensity")));
                    }
                    if x + width > self.width || y + height > self.height {
                        return Err(Error::Domain(format!("shape {i}: rectangle leaves the image bounds")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Paints the spec: background first, then each shape in order
/// (painter's rule — the last shape wins on overlap).
pub fn render_phantom(spec: &PhantomSpec) -> Result<ImageGrid> {
    spec.validate()?;
    let mut samples = vec![spec.background; spec.width * spec.height];
    for shape in &spec.shapes {
        match *shape {
            Shape::Disk { cx, cy, radius, intensity } => {
                let r2 = radius * radius;
                for row in 0..spec.height {
                    for col in 0..spec.width {
                        let dx = col as f64 - cx;
                        let dy = row as f64 - cy;
                        if dx * dx + dy * dy <= r2 {
                            samples[row * spec.width + col] = intensity;
                        }
                    }
                }
            }
            Shape::Rect { x, y, width, height, intensity } => {
                for row in y..y + height {
                    for col in x..x + width {
                        samples[row * spec.width + col] = intensity;
                    }
                }
            }
        }
    }
    ImageGrid::new(spec.width, spec.height, samples)
}

/// Forward degradation: blur with the PSF (reflect boundary) and add
/// i.i.d. Gaussian noise of the model's variance. The generator is owned
/// per call and seeded explicitly, so equal seeds give bit-identical
/// output.
pub fn degrade(ideal: &ImageGrid, psf: &Psf, noise: &NoiseModel, seed: u64) -> ImageGrid {
    let blurred = convolve2d(ideal, psf.kernel(), BoundaryPolicy::Reflect);
    if noise.variance() == 0.0 {
        return blurred;
    }
    let normal = Normal::new(0.0, noise.variance().sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = blurred
        .samples()
        .iter()
        .map(|&v| v + normal.sample(&mut rng))
        .collect();
    ImageGrid::new(ideal.width(), ideal.height(), samples).expect("noise is finite")
}

/// Poisson-count variant for realism experiments: each blurred pixel is
/// replaced by a draw from `Poisson(pixel)`. Requires a non-negative
/// blurred image. This sits outside the Gaussian likelihood that the
/// restoration model assumes.
pub fn degrade_poisson(ideal: &ImageGrid, psf: &Psf, seed: u64) -> Result<ImageGrid> {
    let blurred = convolve2d(ideal, psf.kernel(), BoundaryPolicy::Reflect);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(blurred.samples().len());
    for &v in blurred.samples() {
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "poisson degradation needs non-negative intensities, got {v}"
            )));
        }
        let draw = if v == 0.0 {
            0.0
        } else {
            Poisson::new(v)
                .map_err(|e| Error::Domain(format!("poisson rate {v}: {e}")))?
                .sample(&mut rng)
        };
        samples.push(draw);
    }
    ImageGrid::new(ideal.width(), ideal.height(), samples)
}
