//! Gaussian point-spread-function construction, fitting, and validation.
//!
//! The measurement pipeline mirrors how a blur kernel is characterized in
//! practice: fit an isotropic Gaussian to an imaged point source, check it
//! against an imaged line source, and fit a linear trend of sigma against
//! source distance so PSFs can be predicted at other depths.

use crate::convolve::{convolve2d, BoundaryPolicy, Kernel};
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// A normalized blur kernel together with the sigma that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    kernel: Kernel,
    sigma: f64,
}

impl Psf {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Samples `exp(-(dx^2+dy^2)/(2 sigma^2))` at integer offsets out to
/// `radius` and normalizes to unit sum, so DC gain is exactly 1.
///
/// A radius below `ceil(3 sigma)` truncates visibly; that case is allowed
/// but logged as a warning.
pub fn gaussian_psf(sigma: f64, radius: usize) -> Result<Psf> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("psf sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::Domain("psf radius must be at least 1".into()));
    }
    if (radius as f64) < (3.0 * sigma).ceil() {
        log::warn!("psf radius {radius} is below 3*sigma = {}; kernel will be truncated", 3.0 * sigma);
    }
    let r = radius as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
    for di in -r..=r {
        for dj in -r..=r {
            weights.push((-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= z;
    }
    Ok(Psf {
        kernel: Kernel::new(radius, weights)?,
        sigma,
    })
}

/// Result of fitting a radially symmetric Gaussian to a point source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSourceFit {
    /// Fitted standard deviation in pixels.
    pub sigma: f64,
    /// Fitted sub-pixel center as `(cx, cy)` = (column, row).
    pub center: (f64, f64),
    /// Residual RMS normalized by the fitted peak amplitude.
    pub fit_rmse: f64,
}

const FIT_MAX_ITERATIONS: usize = 100;
const FIT_STEP_TOLERANCE: f64 = 1e-8;

/// Least-squares fit of `A * exp(-((x-cx)^2+(y-cy)^2)/(2 sigma^2))` to an
/// image containing a single dominant blob.
///
/// Centroid moments seed the parameters, then Gauss-Newton with the
/// analytic Jacobian refines `(A, cx, cy, sigma)` until the step norm
/// drops below 1e-8 or 100 iterations elapse (the latter reports the
/// best parameters seen inside the error).
pub fn fit_sigma_to_point_source(img: &ImageGrid) -> Result<PointSourceFit> {
    let max = img.max();
    let median = median_of(img.samples());
    if !(max > 5.0 * median) {
        return Err(Error::NoDominantBlob { max, median });
    }

    // Moment initialization over the positive part of the image.
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for row in 0..img.height() {
        for col in 0..img.width() {
            let v = img.at(row, col).max(0.0);
            m0 += v;
            mx += v * col as f64;
            my += v * row as f64;
        }
    }
    if m0 <= 0.0 {
        return Err(Error::DegenerateFit("image has no positive mass".into()));
    }
    let (cx0, cy0) = (mx / m0, my / m0);
    let mut m2 = 0.0;
    for row in 0..img.height() {
        for col in 0..img.width() {
            let v = img.at(row, col).max(0.0);
            let dx = col as f64 - cx0;
            let dy = row as f64 - cy0;
            m2 += v * (dx * dx + dy * dy);
        }
    }
    // For an isotropic Gaussian, E[dx^2 + dy^2] = 2 sigma^2.
    let sigma0 = (m2 / (2.0 * m0)).sqrt().max(0.5);

    let mut params = [max, cx0, cy0, sigma0]; // (A, cx, cy, sigma)
    for _ in 0..FIT_MAX_ITERATIONS {
        let (jtj, jte) = normal_equations(img, &params);
        let Some(delta) = solve4(jtj, jte) else {
            return Err(Error::DegenerateFit("singular normal equations".into()));
        };
        for (p, d) in params.iter_mut().zip(delta) {
            *p -= d;
        }
        params[3] = params[3].max(1e-6);
        let step = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if step < FIT_STEP_TOLERANCE {
            return Ok(fit_summary(img, &params));
        }
    }
    let best = fit_summary(img, &params);
    Err(Error::FitNotConverged {
        iterations: FIT_MAX_ITERATIONS,
        sigma: best.sigma,
        cx: best.center.0,
        cy: best.center.1,
        fit_rmse: best.fit_rmse,
    })
}

fn fit_summary(img: &ImageGrid, params: &[f64; 4]) -> PointSourceFit {
    let [a, cx, cy, sigma] = *params;
    let mut sse = 0.0;
    for row in 0..img.height() {
        for col in 0..img.width() {
            let e = model(col as f64, row as f64, params) - img.at(row, col);
            sse += e * e;
        }
    }
    let n = (img.width() * img.height()) as f64;
    PointSourceFit {
        sigma,
        center: (cx, cy),
        fit_rmse: (sse / n).sqrt() / a.abs().max(f64::MIN_POSITIVE),
    }
}

#[inline]
fn model(x: f64, y: f64, params: &[f64; 4]) -> f64 {
    let [a, cx, cy, sigma] = *params;
    let r2 = (x - cx).powi(2) + (y - cy).powi(2);
    a * (-r2 / (2.0 * sigma * sigma)).exp()
}

/// Accumulates J^T J and J^T e for the radial Gaussian model.
fn normal_equations(img: &ImageGrid, params: &[f64; 4]) -> ([[f64; 4]; 4], [f64; 4]) {
    let [a, cx, cy, sigma] = *params;
    let s2 = sigma * sigma;
    let mut jtj = [[0.0; 4]; 4];
    let mut jte = [0.0; 4];
    for row in 0..img.height() {
        for col in 0..img.width() {
            let dx = col as f64 - cx;
            let dy = row as f64 - cy;
            let r2 = dx * dx + dy * dy;
            let e_val = (-r2 / (2.0 * s2)).exp();
            let m = a * e_val;
            let jac = [
                e_val,              // d/dA
                m * dx / s2,        // d/dcx
                m * dy / s2,        // d/dcy
                m * r2 / (s2 * sigma), // d/dsigma
            ];
            let resid = m - img.at(row, col);
            for p in 0..4 {
                jte[p] += jac[p] * resid;
                for q in p..4 {
                    jtj[p][q] += jac[p] * jac[q];
                }
            }
        }
    }
    for p in 0..4 {
        for q in 0..p {
            jtj[p][q] = jtj[q][p];
        }
        // Tiny ridge keeps a flat tail from making the system singular.
        jtj[p][p] += 1e-12 * jtj[p][p].abs().max(1e-300);
    }
    (jtj, jte)
}

/// Gaussian elimination with partial pivoting on a 4x4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
        if !x[row].is_finite() {
            return None;
        }
    }
    Some(x)
}

fn median_of(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Orientation of an imaged line source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineOrientation {
    Horizontal,
    Vertical,
}

/// Fraction of the line length ignored at each end by default.
pub const DEFAULT_END_MARGIN: f64 = 0.10;

/// Checks a fitted PSF against an acquired line-source image.
///
/// A unit-intensity ideal line is synthesized at the acquired line's
/// position, convolved with the PSF, least-squares scaled in amplitude to
/// the acquisition, and compared over the span that excludes the end
/// margins. The return value is the residual RMS as a percentage of the
/// acquired peak, so a matched PSF on noiseless data scores 0.
pub fn verify_line_source(
    psf: &Psf,
    acquired: &ImageGrid,
    orientation: LineOrientation,
) -> Result<f64> {
    verify_line_source_with_margin(psf, acquired, orientation, DEFAULT_END_MARGIN)
}

/// [`verify_line_source`] with an explicit end-margin fraction in `[0, 0.45]`.
pub fn verify_line_source_with_margin(
    psf: &Psf,
    acquired: &ImageGrid,
    orientation: LineOrientation,
    end_margin: f64,
) -> Result<f64> {
    if !(0.0..=0.45).contains(&end_margin) {
        return Err(Error::Domain(format!(
            "end margin must be in [0, 0.45], got {end_margin}"
        )));
    }

    let row_conc = concentration(acquired, LineOrientation::Horizontal);
    let col_conc = concentration(acquired, LineOrientation::Vertical);
    let dominant = if row_conc >= col_conc {
        LineOrientation::Horizontal
    } else {
        LineOrientation::Vertical
    };
    if dominant != orientation {
        return Err(Error::OrientationMismatch {
            expected: match orientation {
                LineOrientation::Horizontal => "horizontal".into(),
                LineOrientation::Vertical => "vertical".into(),
            },
        });
    }

    // Place the ideal unit line on the acquired line's axis position.
    let ideal = match orientation {
        LineOrientation::Horizontal => {
            let row = argmax_axis_sum(acquired, LineOrientation::Horizontal);
            ImageGrid::from_fn(acquired.width(), acquired.height(), |i, _| {
                if i == row {
                    1.0
                } else {
                    0.0
                }
            })
        }
        LineOrientation::Vertical => {
            let col = argmax_axis_sum(acquired, LineOrientation::Vertical);
            ImageGrid::from_fn(acquired.width(), acquired.height(), |_, j| {
                if j == col {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    let synth = convolve2d(&ideal, psf.kernel(), BoundaryPolicy::Reflect);

    let len = match orientation {
        LineOrientation::Horizontal => acquired.width(),
        LineOrientation::Vertical => acquired.height(),
    };
    let margin = (end_margin * len as f64).floor() as usize;
    let keep = |row: usize, col: usize| match orientation {
        LineOrientation::Horizontal => col >= margin && col < acquired.width() - margin,
        LineOrientation::Vertical => row >= margin && row < acquired.height() - margin,
    };

    let (mut num, mut den) = (0.0, 0.0);
    for row in 0..acquired.height() {
        for col in 0..acquired.width() {
            if keep(row, col) {
                num += synth.at(row, col) * acquired.at(row, col);
                den += synth.at(row, col) * synth.at(row, col);
            }
        }
    }
    if den <= 0.0 {
        return Err(Error::DegenerateFit("synthesized line has no energy in the evaluated span".into()));
    }
    let scale = num / den;

    let (mut sse, mut count, mut peak) = (0.0, 0usize, 0.0f64);
    for row in 0..acquired.height() {
        for col in 0..acquired.width() {
            if keep(row, col) {
                let r = scale * synth.at(row, col) - acquired.at(row, col);
                sse += r * r;
                count += 1;
                peak = peak.max(acquired.at(row, col).abs());
            }
        }
    }
    if peak <= 0.0 {
        return Err(Error::DegenerateFit("acquired line has zero peak in the evaluated span".into()));
    }
    Ok(100.0 * (sse / count as f64).sqrt() / peak)
}

/// How concentrated the image mass is along one axis: max/mean of the
/// per-row (or per-column) sums. A horizontal line yields a high row
/// concentration and a flat column profile.
fn concentration(img: &ImageGrid, axis: LineOrientation) -> f64 {
    let sums = axis_sums(img, axis);
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mean.abs() < 1e-300 {
        0.0
    } else {
        max / mean
    }
}

fn axis_sums(img: &ImageGrid, axis: LineOrientation) -> Vec<f64> {
    match axis {
        LineOrientation::Horizontal => (0..img.height())
            .map(|i| (0..img.width()).map(|j| img.at(i, j)).sum())
            .collect(),
        LineOrientation::Vertical => (0..img.width())
            .map(|j| (0..img.height()).map(|i| img.at(i, j)).sum())
            .collect(),
    }
}

fn argmax_axis_sum(img: &ImageGrid, axis: LineOrientation) -> usize {
    let sums = axis_sums(img, axis);
    sums.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

/// Linear model of PSF sigma against distance from the collimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthTrend {
    /// Sigma pixels per centimeter.
    pub slope: f64,
    /// Sigma at zero distance, in pixels.
    pub intercept: f64,
    /// RMS of the fit residuals.
    pub fit_residual: f64,
}

/// Prediction of [`DepthTrend::predict_sigma`]; `clamped` is set when the
/// raw line value was non-positive and the floor was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPrediction {
    pub sigma: f64,
    pub clamped: bool,
}

impl DepthTrend {
    /// `slope * distance + intercept`, clamped below at `sigma_min`.
    pub fn predict_sigma(&self, distance_cm: f64, sigma_min: f64) -> SigmaPrediction {
        assert!(sigma_min > 0.0, "sigma_min must be positive");
        let raw = self.slope * distance_cm + self.intercept;
        if raw <= 0.0 {
            SigmaPrediction {
                sigma: sigma_min,
                clamped: true,
            }
        } else {
            SigmaPrediction {
                sigma: raw.max(sigma_min),
                clamped: raw < sigma_min,
            }
        }
    }
}

/// Ordinary least squares line through `(distance_cm, sigma)` points.
pub fn fit_depth_trend(points: &[(f64, f64)]) -> Result<DepthTrend> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "depth trend needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_d = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_s = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(d, s) in points {
        sxx += (d - mean_d) * (d - mean_d);
        sxy += (d - mean_d) * (s - mean_s);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all distances are identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_s - slope * mean_d;
    let sse: f64 = points
        .iter()
        .map(|&(d, s)| (slope * d + intercept - s).powi(2))
        .sum();
    Ok(DepthTrend {
        slope,
        intercept,
        fit_residual: (sse / n).sqrt(),
    })
}

/// One point-source measurement: the row format of the depth CSV
/// (`distance_cm,sigma,fit_rmse`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMeasurement {
    pub distance_cm: f64,
    pub sigma: f64,
    pub fit_rmse: f64,
}

pub const DEPTH_CSV_HEADER: &str = "distance_cm,sigma,fit_rmse";

/// Serializes measurements with the standard header.
pub fn write_depth_csv(rows: &[DepthMeasurement]) -> String {
    let mut out = String::from(DEPTH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.distance_cm, r.sigma, r.fit_rmse));
    }
    out
}

/// Parses depth CSV text; the header row and a missing trailing rmse
/// column are both tolerated.
pub fn read_depth_csv(text: &str) -> Result<Vec<DepthMeasurement>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("distance_cm") || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Domain(format!(
                "depth CSV line {}: expected distance_cm,sigma[,fit_rmse]",
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Domain(format!("depth CSV line {}: bad number {s:?}", lineno + 1)))
        };
        rows.push(DepthMeasurement {
            distance_cm: parse(fields[0])?,
            sigma: parse(fields[1])?,
            fit_rmse: if fields.len() > 2 { parse(fields[2])? } else { 0.0 },
        });
    }
    Ok(rows)
}
