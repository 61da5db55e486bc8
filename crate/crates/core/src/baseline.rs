//! Comparison and post-processing filters: the fixed 3x3 sharpening
//! kernel, frequency-domain Wiener restoration, and Sobel edge maps.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::convolve::{convolve2d, resolve, BoundaryPolicy, Kernel};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::mfa::NoiseModel;
use crate::psf::Psf;

/// The standard sharpening matrix, used verbatim (its sum is 0.982, not
/// 1, and the corner/edge precision is deliberately uneven).
pub const SHARPEN_WEIGHTS: [f64; 9] = [
    -0.167, -0.67, -0.167, //
    -0.67, 4.33, -0.67, //
    -0.167, -0.67, -0.167,
];

pub fn sharpen_kernel() -> Kernel {
    Kernel::new(1, SHARPEN_WEIGHTS.to_vec()).expect("static weights are valid")
}

/// Convolves `passes` times with the sharpening kernel, reflect boundary.
pub fn sharpen(img: &ImageGrid, passes: usize) -> ImageGrid {
    assert!(passes >= 1, "sharpen needs at least one pass");
    let k = sharpen_kernel();
    let mut out = convolve2d(img, &k, BoundaryPolicy::Reflect);
    for _ in 1..passes {
        out = convolve2d(&out, &k, BoundaryPolicy::Reflect);
    }
    out
}

/// Per-frequency signal power model for [`wiener`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalPower {
    /// Estimate from the observed periodogram: `max(|G|^2/N - var, var)`.
    Estimate,
    /// A flat, caller-supplied signal power (must be positive).
    Explicit(f64),
}

/// Frequency-domain Wiener deconvolution
/// `F = conj(H) G / (|H|^2 + var / S_f)`.
///
/// The image is reflect-padded to the next power of two (with a margin of
/// at least twice the kernel radius) before the FFT and cropped after, so
/// borders see mirrored context rather than wraparound. The `Estimate`
/// signal-power model floors the periodogram at the noise variance, which
/// bounds the per-frequency attenuation; use `Explicit` to drive the
/// filter to its asymptotic limits.
pub fn wiener(g: &ImageGrid, psf: &Psf, noise: &NoiseModel, signal_power: SignalPower) -> Result<ImageGrid> {
    if let SignalPower::Explicit(s) = signal_power {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Domain(format!("explicit signal power must be positive, got {s}")));
        }
    }
    let (w, h) = (g.width(), g.height());
    let margin = (2 * psf.kernel().radius()).max(8);
    let pw = (w + 2 * margin).next_power_of_two();
    let ph = (h + 2 * margin).next_power_of_two();
    let (off_x, off_y) = ((pw - w) / 2, (ph - h) / 2);
    let n = (pw * ph) as f64;

    // Reflect-pad the measurement.
    let mut spec_g = vec![Complex::new(0.0, 0.0); pw * ph];
    for i in 0..ph {
        let src_i = resolve(i as isize - off_y as isize, h, BoundaryPolicy::Reflect).unwrap();
        for j in 0..pw {
            let src_j = resolve(j as isize - off_x as isize, w, BoundaryPolicy::Reflect).unwrap();
            spec_g[i * pw + j] = Complex::new(g.at(src_i, src_j), 0.0);
        }
    }

    // Kernel centered at the origin with wraparound.
    let mut spec_h = vec![Complex::new(0.0, 0.0); pw * ph];
    let r = psf.kernel().radius() as isize;
    for di in -r..=r {
        let row = di.rem_euclid(ph as isize) as usize;
        for dj in -r..=r {
            let col = dj.rem_euclid(pw as isize) as usize;
            spec_h[row * pw + col] += Complex::new(psf.kernel().at(di, dj), 0.0);
        }
    }

    fft2d(&mut spec_g, pw, ph, false);
    fft2d(&mut spec_h, pw, ph, false);

    let variance = noise.variance();
    let mut spec_f = vec![Complex::new(0.0, 0.0); pw * ph];
    for idx in 0..pw * ph {
        let h_val = spec_h[idx];
        let h2 = h_val.norm_sqr();
        let ratio = match signal_power {
            SignalPower::Explicit(s) => variance / s,
            SignalPower::Estimate => {
                let periodogram = spec_g[idx].norm_sqr() / n;
                let s_f = (periodogram - variance).max(variance);
                if s_f > 0.0 {
                    variance / s_f
                } else {
                    0.0
                }
            }
        };
        let denom = h2 + ratio;
        if denom > 0.0 {
            spec_f[idx] = h_val.conj() * spec_g[idx] / denom;
        }
    }

    fft2d(&mut spec_f, pw, ph, true);
    let out = ImageGrid::from_fn(w, h, |i, j| {
        spec_f[(i + off_y) * pw + (j + off_x)].re / n
    });
    Ok(out)
}

/// Row-column 2D FFT, in place. Inverse is unnormalized (callers divide).
fn fft2d(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft_row = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    let fft_col = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    for row in data.chunks_exact_mut(width) {
        fft_row.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        fft_col.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)`, reflect boundary.
pub fn sobel(img: &ImageGrid) -> Result<ImageGrid> {
    if img.width() < 3 || img.height() < 3 {
        return Err(Error::Domain(format!(
            "sobel needs at least 3x3, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    // The masks are correlation masks; convolve with the flip.
    let gx_kernel = Kernel::new(1, SOBEL_X.to_vec()).unwrap().flip();
    let gy_kernel = Kernel::new(1, SOBEL_Y.to_vec()).unwrap().flip();
    let gx = convolve2d(img, &gx_kernel, BoundaryPolicy::Reflect);
    let gy = convolve2d(img, &gy_kernel, BoundaryPolicy::Reflect);
    Ok(ImageGrid::from_fn(img.width(), img.height(), |i, j| {
        gx.at(i, j).hypot(gy.at(i, j))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::gaussian_psf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn sharpen_kernel_sum_is_0_982() {
        assert!((sharpen_kernel().sum() - 0.982).abs() <= 1e-12);
    }

    #[test]
    fn sharpen_impulse_response_is_the_matrix_exactly() {
        let img = ImageGrid::from_fn(7, 7, |i, j| if (i, j) == (3, 3) { 1.0 } else { 0.0 });
        let out = sharpen(&img, 1);
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let expect = sharpen_kernel().at(di, dj);
                let got = out.at((3 + di) as usize, (3 + dj) as usize);
                assert_eq!(got, expect, "offset ({di},{dj})");
            }
        }
    }

    #[test]
    fn sharpen_scales_constants_by_kernel_sum() {
        let c = 12.5;
        let out = sharpen(&ImageGrid::constant(9, 9, c), 1);
        for &s in out.samples() {
            assert!((s - c * 0.982).abs() < 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn sharpen_noise_gain_matches_weight_energy() {
        let expected: f64 = SHARPEN_WEIGHTS.iter().map(|w| w * w).sum::<f64>().sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut total_ratio = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = ImageGrid::from_fn(64, 64, |_, _| normal.sample(&mut rng));
            let out = sharpen(&noise, 1);
            // Interior only: border pixels reuse mirrored samples and are
            // not i.i.d.
            let std_of = |img: &ImageGrid| {
                let mut vals = Vec::new();
                for i in 2..62 {
                    for j in 2..62 {
                        vals.push(img.at(i, j));
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64)
                    .sqrt()
            };
            total_ratio += std_of(&out) / std_of(&noise);
        }
        let mean_ratio = total_ratio / seeds as f64;
        assert!(
            (mean_ratio - expected).abs() / expected < 0.05,
            "mean ratio {mean_ratio}, expected {expected}"
        );
    }

    proptest! {
        #[test]
        fn sharpen_is_linear(seed in 0u64..200, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ImageGrid::from_fn(6, 6, |_, _| rng.random_range(-5.0..5.0));
            let y = ImageGrid::from_fn(6, 6, |_, _| rng.random_range(-5.0..5.0));
            let combo = ImageGrid::from_fn(6, 6, |i, j| a * x.at(i, j) + b * y.at(i, j));
            let lhs = sharpen(&combo, 1);
            let sx = sharpen(&x, 1);
            let sy = sharpen(&y, 1);
            for i in 0..6 {
                for j in 0..6 {
                    let rhs = a * sx.at(i, j) + b * sy.at(i, j);
                    prop_assert!((lhs.at(i, j) - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn wiener_with_delta_psf_and_negligible_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = ImageGrid::from_fn(24, 18, |_, _| rng.random_range(0.0..100.0));
        let psf = gaussian_psf(1e-3, 1).unwrap();
        let noise = NoiseModel::new(1e-30, 1.0).unwrap();
        let out = wiener(&g, &psf, &noise, SignalPower::Estimate).unwrap();
        for (a, b) in out.samples().iter().zip(g.samples()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn wiener_attenuates_under_huge_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = ImageGrid::from_fn(16, 16, |_, _| rng.random_range(-1.0..1.0));
        let psf = gaussian_psf(1.0, 3).unwrap();
        let norm = |img: &ImageGrid| img.samples().iter().map(|v| v * v).sum::<f64>().sqrt();

        // Explicit signal power: attenuation goes to zero as variance grows.
        let strong = NoiseModel::new(1e9, 1.0).unwrap();
        let out = wiener(&g, &psf, &strong, SignalPower::Explicit(1.0)).unwrap();
        assert!(norm(&out) < 1e-6 * norm(&g));

        // Estimate mode saturates (the variance floors the signal power)
        // but still attenuates.
        let out = wiener(&g, &psf, &strong, SignalPower::Estimate).unwrap();
        assert!(norm(&out) < norm(&g));
    }

    #[test]
    fn wiener_rejects_bad_signal_power() {
        let g = ImageGrid::constant(8, 8, 1.0);
        let psf = gaussian_psf(1.0, 2).unwrap();
        let noise = NoiseModel::new(1.0, 1.0).unwrap();
        assert!(wiener(&g, &psf, &noise, SignalPower::Explicit(0.0)).is_err());
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let out = sobel(&ImageGrid::constant(8, 8, 42.0)).unwrap();
        assert!(out.samples().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn sobel_of_vertical_step_is_4s_at_the_edge() {
        let s = 3.0;
        let img = ImageGrid::from_fn(10, 8, |_, j| if j >= 5 { s } else { 0.0 });
        let out = sobel(&img).unwrap();
        for i in 0..8 {
            assert!((out.at(i, 4) - 4.0 * s).abs() < 1e-12);
            assert!((out.at(i, 5) - 4.0 * s).abs() < 1e-12);
            assert!(out.at(i, 2).abs() < 1e-12);
            assert!(out.at(i, 7).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_ignores_dc_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageGrid::from_fn(9, 9, |_, _| rng.random_range(0.0..10.0));
        let shifted = img.map(|v| v + 137.0);
        let a = sobel(&img).unwrap();
        let b = sobel(&shifted).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sobel_needs_3x3() {
        assert!(sobel(&ImageGrid::constant(2, 8, 0.0)).is_err());
    }
}
