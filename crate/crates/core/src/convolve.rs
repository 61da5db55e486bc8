//! Direct 2D convolution with an explicit boundary policy.
//!
//! Kernels here are small (blur PSFs, 3x3 filters), so everything is
//! spatial-domain; the only FFT in the crate lives in the Wiener filter.
//! [`convolve2d_adjoint`] is the exact transpose of [`convolve2d`] for
//! the same boundary policy, which is what an analytic data-term
//! gradient needs. Under [`BoundaryPolicy::Zero`] the adjoint coincides
//! with convolution by the flipped kernel.

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Square odd-sided convolution kernel, center-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel {
    /// Builds a `(2*radius+1) x (2*radius+1)` kernel from row-major weights.
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "kernel of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("kernel weights must be finite".into()));
        }
        Ok(Self { radius, weights })
    }

    /// The identity kernel.
    pub fn delta() -> Self {
        Self {
            radius: 0,
            weights: vec![1.0],
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at signed offset `(di, dj)` from the center.
    #[inline]
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = self.radius as isize;
        debug_assert!(di.abs() <= r && dj.abs() <= r);
        let side = self.side() as isize;
        self.weights[((di + r) * side + (dj + r)) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// 180-degree rotation; `flip(flip(k)) == k`.
    pub fn flip(&self) -> Kernel {
        let mut weights = self.weights.clone();
        weights.reverse();
        Kernel {
            radius: self.radius,
            weights,
        }
    }
}

/// How out-of-range source pixels are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    /// Mirror without repeating the edge pixel: index -1 maps to 1.
    #[default]
    Reflect,
    /// Clamp to the nearest edge pixel.
    Replicate,
    /// Out-of-range pixels read as zero.
    Zero,
}

/// Resolves a possibly out-of-range index against an axis of length `n`.
/// Returns `None` only under the zero policy.
#[inline]
pub(crate) fn resolve(idx: isize, n: usize, policy: BoundaryPolicy) -> Option<usize> {
    let ni = n as isize;
    if (0..ni).contains(&idx) {
        return Some(idx as usize);
    }
    match policy {
        BoundaryPolicy::Zero => None,
        BoundaryPolicy::Replicate => Some(idx.clamp(0, ni - 1) as usize),
        BoundaryPolicy::Reflect => {
            if n == 1 {
                return Some(0);
            }
            // Fold into the period of the mirrored sequence (2n - 2).
            let period = 2 * (ni - 1);
            let mut m = idx.rem_euclid(period);
            if m >= ni {
                m = period - m;
            }
            Some(m as usize)
        }
    }
}

/// Discrete 2D convolution: `out(p) = sum_m k(m) * img(p - m)`.
///
/// Output dimensions equal input dimensions; the operation is linear in
/// `img`. Summation order is fixed (row-major over kernel taps), so
/// results are bit-reproducible.
pub fn convolve2d(img: &ImageGrid, k: &Kernel, boundary: BoundaryPolicy) -> ImageGrid {
    let (w, h) = (img.width(), img.height());
    let r = k.radius() as isize;
    let mut out = vec![0.0; w * h];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for di in -r..=r {
                let src_i = match resolve(i - di, h, boundary) {
                    Some(v) => v,
                    None => continue,
                };
                for dj in -r..=r {
                    let wgt = k.at(di, dj);
                    if let Some(src_j) = resolve(j - dj, w, boundary) {
                        acc += wgt * img.at(src_i, src_j);
                    }
                }
            }
            out[(i as usize) * w + j as usize] = acc;
        }
    }
    ImageGrid::from_raw_unchecked(w, h, out)
}

/// Exact adjoint (transpose) of [`convolve2d`] for the same boundary
/// policy: `<convolve2d(x), y> == <x, convolve2d_adjoint(y)>` for all
/// `x`, `y`. Under the zero policy this equals
/// `convolve2d(img, k.flip(), Zero)`; under reflect/replicate the
/// boundary contributions fold back onto their source pixels.
pub fn convolve2d_adjoint(img: &ImageGrid, k: &Kernel, boundary: BoundaryPolicy) -> ImageGrid {
    let (w, h) = (img.width(), img.height());
    let r = k.radius() as isize;
    let mut out = vec![0.0; w * h];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let v = img.at(i as usize, j as usize);
            for di in -r..=r {
                let dst_i = match resolve(i - di, h, boundary) {
                    Some(p) => p,
                    None => continue,
                };
                for dj in -r..=r {
                    if let Some(dst_j) = resolve(j - dj, w, boundary) {
                        out[dst_i * w + dst_j] += k.at(di, dj) * v;
                    }
                }
            }
        }
    }
    ImageGrid::from_raw_unchecked(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force correlation oracle: `out(p) = sum_m k(m) img(p + m)`.
    fn correlate_oracle(img: &ImageGrid, k: &Kernel, boundary: BoundaryPolicy) -> ImageGrid {
        let (w, h) = (img.width(), img.height());
        let r = k.radius() as isize;
        ImageGrid::from_fn(w, h, |i, j| {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let si = resolve(i as isize + di, h, boundary);
                    let sj = resolve(j as isize + dj, w, boundary);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        acc += k.at(di, dj) * img.at(si, sj);
                    }
                }
            }
            acc
        })
    }

    fn gaussian_kernel(sigma: f64, radius: usize) -> Kernel {
        let side = 2 * radius + 1;
        let mut weights = Vec::with_capacity(side * side);
        for di in -(radius as isize)..=radius as isize {
            for dj in -(radius as isize)..=radius as isize {
                weights.push((-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let z: f64 = weights.iter().sum();
        Kernel::new(radius, weights.iter().map(|w| w / z).collect()).unwrap()
    }

    fn rng_grid(w: usize, h: usize, seed: u64) -> ImageGrid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(w, h, |_, _| rng.random_range(-10.0..10.0))
    }

    fn dot(a: &ImageGrid, b: &ImageGrid) -> f64 {
        a.samples().iter().zip(b.samples()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let img = rng_grid(7, 5, 3);
        let delta3 = Kernel::new(1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for b in [BoundaryPolicy::Reflect, BoundaryPolicy::Replicate, BoundaryPolicy::Zero] {
            assert_eq!(convolve2d(&img, &Kernel::delta(), b), img);
            assert_eq!(convolve2d(&img, &delta3, b), img);
        }
    }

    #[test]
    fn unit_sum_kernel_preserves_dc_under_reflect() {
        let img = ImageGrid::constant(9, 6, 4.25);
        let k = gaussian_kernel(1.3, 3);
        let out = convolve2d(&img, &k, BoundaryPolicy::Reflect);
        for &s in out.samples() {
            assert!((s - 4.25).abs() < 1e-12, "got {s}");
        }
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let k = gaussian_kernel(1.0, 2);
        let img = ImageGrid::from_fn(5, 5, |i, j| if (i, j) == (2, 2) { 1.0 } else { 0.0 });
        let out = convolve2d(&img, &k, BoundaryPolicy::Zero);
        for di in -2isize..=2 {
            for dj in -2isize..=2 {
                let expect = k.at(di, dj);
                let got = out.at((2 + di) as usize, (2 + dj) as usize);
                assert!((got - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_of_symmetric_kernel_is_itself() {
        let k = gaussian_kernel(2.0, 3);
        assert_eq!(k.flip(), k);
    }

    #[test]
    fn flip_rotates_asymmetric_kernel() {
        let k = Kernel::new(1, (1..=9).map(f64::from).collect()).unwrap();
        let f = k.flip();
        assert_eq!(f.weights(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(f.flip(), k);
        assert_eq!(f.at(1, 1), k.at(-1, -1));
    }

    #[test]
    fn convolve_with_flipped_kernel_is_correlation() {
        let k = Kernel::new(1, vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0, -2.0, 0.25, 4.0]).unwrap();
        for seed in 0..4 {
            let img = rng_grid(8, 8, seed);
            for b in [BoundaryPolicy::Reflect, BoundaryPolicy::Zero, BoundaryPolicy::Replicate] {
                let via_flip = convolve2d(&img, &k.flip(), b);
                let oracle = correlate_oracle(&img, &k, b);
                for (a, e) in via_flip.samples().iter().zip(oracle.samples()) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_inner_product_for_all_policies() {
        let k = gaussian_kernel(1.0, 2);
        for (seed, b) in [
            (0, BoundaryPolicy::Zero),
            (1, BoundaryPolicy::Reflect),
            (2, BoundaryPolicy::Replicate),
        ] {
            let x = rng_grid(8, 8, seed);
            let y = rng_grid(8, 8, seed + 100);
            let lhs = dot(&convolve2d(&x, &k, b), &y);
            let rhs = dot(&x, &convolve2d_adjoint(&y, &k, b));
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0),
                "adjoint mismatch for {b:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn zero_boundary_adjoint_is_flip_convolution() {
        let k = Kernel::new(1, vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0, -2.0, 0.25, 4.0]).unwrap();
        let img = rng_grid(8, 8, 11);
        let a = convolve2d_adjoint(&img, &k, BoundaryPolicy::Zero);
        let b = convolve2d(&img, &k.flip(), BoundaryPolicy::Zero);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_equivariance_in_the_interior() {
        // Convolve a padded image, shift by one pixel, compare interiors.
        let base = rng_grid(12, 12, 7);
        let shifted = ImageGrid::from_fn(12, 12, |i, j| {
            if i + 1 < 12 && j + 1 < 12 {
                base.at(i + 1, j + 1)
            } else {
                0.0
            }
        });
        let k = gaussian_kernel(1.0, 2);
        let a = convolve2d(&base, &k, BoundaryPolicy::Reflect);
        let b = convolve2d(&shifted, &k, BoundaryPolicy::Reflect);
        // Pixels at least radius+1 away from every border are unaffected
        // by boundary handling and must shift verbatim.
        for i in 3..8 {
            for j in 3..8 {
                assert!((b.at(i, j) - a.at(i + 1, j + 1)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn linearity(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = rng_grid(6, 6, seed);
            let y = rng_grid(6, 6, seed.wrapping_add(999));
            let k = gaussian_kernel(0.8, 1);
            let combo = ImageGrid::from_fn(6, 6, |i, j| a * x.at(i, j) + b * y.at(i, j));
            let lhs = convolve2d(&combo, &k, BoundaryPolicy::Reflect);
            let cx = convolve2d(&x, &k, BoundaryPolicy::Reflect);
            let cy = convolve2d(&y, &k, BoundaryPolicy::Reflect);
            for i in 0..6 {
                for j in 0..6 {
                    let rhs = a * cx.at(i, j) + b * cy.at(i, j);
                    prop_assert!((lhs.at(i, j) - rhs).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn reflect_resolve_stays_in_range(idx in -50isize..50, n in 1usize..12) {
            let r = resolve(idx, n, BoundaryPolicy::Reflect).unwrap();
            prop_assert!(r < n);
        }
    }
}
