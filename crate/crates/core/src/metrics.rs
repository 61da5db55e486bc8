//! Quantitative evaluation: RMSE, PSNR, and flood-source noise
//! estimation.

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::mfa::NoiseModel;

fn check_dims(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Root mean square error between two equally sized grids.
pub fn rmse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sse / a.samples().len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB: `20 log10(peak / rmse)`.
/// Identical images report the `+infinity` sentinel.
pub fn psnr(a: &ImageGrid, reference: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Domain(format!("psnr peak must be positive, got {peak}")));
    }
    let e = rmse(a, reference)?;
    if e == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(20.0 * (peak / e).log10())
    }
}

/// Axis-aligned pixel rectangle; `x` is the column of the left edge and
/// `y` the row of the top edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Minimum pixels for a noise-estimation region.
pub const MIN_NOISE_REGION: usize = 16;

/// Estimates the noise variance from a flood-source image.
///
/// A least-squares plane over the region absorbs flood non-uniformity;
/// the variance of the residuals (with 3 degrees of freedom spent on the
/// plane) is the noise estimate, and the raw region mean becomes the
/// intensity scale the model was measured at.
pub fn estimate_noise_variance(flood: &ImageGrid, region: Rect) -> Result<NoiseModel> {
    if region.x + region.width > flood.width() || region.y + region.height > flood.height() {
        return Err(Error::Domain(format!(
            "region {region:?} exceeds flood image {}x{}",
            flood.width(),
            flood.height()
        )));
    }
    if region.area() < MIN_NOISE_REGION {
        return Err(Error::Domain(format!(
            "noise region needs at least {MIN_NOISE_REGION} pixels, got {}",
            region.area()
        )));
    }

    // Plane fit v = p0 + p1*dx + p2*dy over centered coordinates.
    let n = region.area() as f64;
    let cx = (region.width as f64 - 1.0) / 2.0;
    let cy = (region.height as f64 - 1.0) / 2.0;
    let (mut s_v, mut s_xv, mut s_yv) = (0.0, 0.0, 0.0);
    let (mut s_xx, mut s_yy) = (0.0, 0.0);
    for r in 0..region.height {
        for c in 0..region.width {
            let v = flood.at(region.y + r, region.x + c);
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            s_v += v;
            s_xv += dx * v;
            s_yv += dy * v;
            s_xx += dx * dx;
            s_yy += dy * dy;
        }
    }
    // Centered coordinates make the normal equations diagonal.
    let p0 = s_v / n;
    let p1 = if s_xx > 0.0 { s_xv / s_xx } else { 0.0 };
    let p2 = if s_yy > 0.0 { s_yv / s_yy } else { 0.0 };

    let mut sse = 0.0;
    for r in 0..region.height {
        for c in 0..region.width {
            let v = flood.at(region.y + r, region.x + c);
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let resid = v - (p0 + p1 * dx + p2 * dy);
            sse += resid * resid;
        }
    }
    let dof = (region.area() - 3) as f64;
    NoiseModel::new(sse / dof, p0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn rmse_of_identical_grids_is_zero() {
        let img = ImageGrid::constant(5, 5, 3.0);
        assert_eq!(rmse(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_constant_offset_is_the_offset() {
        let a = ImageGrid::constant(6, 4, 1.0);
        let b = ImageGrid::constant(6, 4, 4.5);
        assert!((rmse(&a, &b).unwrap() - 3.5).abs() < 1e-15);
    }

    #[test]
    fn rmse_hand_value() {
        let a = ImageGrid::new(2, 1, vec![0.0, 0.0]).unwrap();
        let b = ImageGrid::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert!((rmse(&a, &b).unwrap() - (25.0f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_dim_mismatch() {
        let a = ImageGrid::constant(3, 3, 0.0);
        let b = ImageGrid::constant(4, 3, 0.0);
        assert!(matches!(rmse(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn psnr_values() {
        let a = ImageGrid::constant(4, 4, 1.0);
        assert_eq!(psnr(&a, &a, 100.0).unwrap(), f64::INFINITY);
        let b = ImageGrid::constant(4, 4, 101.0); // rmse 100 == peak
        assert!((psnr(&b, &a, 100.0).unwrap() - 0.0).abs() < 1e-12);
        let c = ImageGrid::constant(4, 4, 2.0); // rmse 1 == peak/100
        assert!((psnr(&c, &a, 100.0).unwrap() - 40.0).abs() < 1e-12);
    }

    #[test]
    fn constant_region_estimates_zero_variance() {
        let flood = ImageGrid::constant(16, 16, 100.0);
        let model = estimate_noise_variance(
            &flood,
            Rect { x: 2, y: 2, width: 8, height: 8 },
        )
        .unwrap();
        assert_eq!(model.variance(), 0.0);
        assert_eq!(model.measured_at_scale(), 100.0);
    }

    #[test]
    fn recovers_injected_variance_within_ten_percent() {
        let normal = Normal::new(0.0, 2.0).unwrap(); // variance 4
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let flood = ImageGrid::from_fn(64, 64, |_, _| 500.0 + normal.sample(&mut rng));
        let model = estimate_noise_variance(
            &flood,
            Rect { x: 0, y: 0, width: 64, height: 64 },
        )
        .unwrap();
        assert!((model.variance() - 4.0).abs() / 4.0 < 0.10, "{}", model.variance());
        assert!((model.measured_at_scale() - 500.0).abs() < 1.0);
    }

    #[test]
    fn plane_removal_leaves_injected_variance() {
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flood = ImageGrid::from_fn(64, 64, |r, c| {
            300.0 + 0.8 * c as f64 - 0.5 * r as f64 + normal.sample(&mut rng)
        });
        let model = estimate_noise_variance(
            &flood,
            Rect { x: 0, y: 0, width: 64, height: 64 },
        )
        .unwrap();
        assert!((model.variance() - 4.0).abs() / 4.0 < 0.10, "{}", model.variance());
    }

    #[test]
    fn region_too_small_or_out_of_bounds() {
        let flood = ImageGrid::constant(16, 16, 1.0);
        assert!(estimate_noise_variance(&flood, Rect { x: 0, y: 0, width: 3, height: 5 }).is_err());
        assert!(estimate_noise_variance(&flood, Rect { x: 10, y: 0, width: 8, height: 8 }).is_err());
    }

    proptest! {
        #[test]
        fn rmse_is_symmetric_and_triangular(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grid = || {
                let mut r2 = ChaCha8Rng::seed_from_u64(rng.random());
                ImageGrid::from_fn(5, 5, move |_, _| r2.random_range(-10.0..10.0))
            };
            let a = grid();
            let b = grid();
            let c = grid();
            let ab = rmse(&a, &b).unwrap();
            let ba = rmse(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let ac = rmse(&a, &c).unwrap();
            let cb = rmse(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn rmse_scales_with_intensity(seed in 0u64..300, k in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ImageGrid::from_fn(5, 5, |_, _| rng.random_range(-10.0..10.0));
            let b = ImageGrid::from_fn(5, 5, |_, _| rng.random_range(-10.0..10.0));
            let lhs = rmse(&a.scale_intensity(k), &b.scale_intensity(k)).unwrap();
            let rhs = k.abs() * rmse(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }
    }
}
