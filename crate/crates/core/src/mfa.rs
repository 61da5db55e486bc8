//! Mean field annealing restoration.
//!
//! The objective is a Hamiltonian with two parts: a data-fidelity
//! ("noise") term `sum (1/2 sigma^2) ((f (*) h) - g)^2` and an
//! edge-preserving prior `sum -(1/T) exp(-Lambda^2 / (2 T^2))` weighted
//! by `beta`, where `Lambda^2` is the quadratic variation built from
//! second differences. Gradient descent minimizes the total while a
//! temperature parameter decays geometrically, which narrows and deepens
//! the inverted-Gaussian penalty so small non-edge gradients are smoothed
//! ever more aggressively while true edges survive.
//!
//! Everything here is deterministic: fixed summation orders, no RNG.

use crate::convolve::{convolve2d, convolve2d_adjoint, BoundaryPolicy};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::psf::Psf;

/// Scalar noise variance plus the intensity scale it was measured at.
///
/// Variance scales with the square of any intensity rescaling applied to
/// the image, so a model calibrated on a flood image must be converted
/// with [`NoiseModel::rescaled_by`] before use at a different scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    variance: f64,
    measured_at_scale: f64,
}

impl NoiseModel {
    /// Variance must be finite and non-negative; zero is representable
    /// (a noiseless calibration) but restoration requires it positive.
    pub fn new(variance: f64, measured_at_scale: f64) -> Result<Self> {
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(Error::Domain(format!(
                "noise variance must be non-negative and finite, got {variance}"
            )));
        }
        if !(measured_at_scale.is_finite() && measured_at_scale > 0.0) {
            return Err(Error::Domain(format!(
                "measurement scale must be positive and finite, got {measured_at_scale}"
            )));
        }
        Ok(Self {
            variance,
            measured_at_scale,
        })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn measured_at_scale(&self) -> f64 {
        self.measured_at_scale
    }

    /// The model after the image is intensity-scaled by `k`: variance
    /// picks up a factor of exactly `k^2`.
    pub fn rescaled_by(&self, k: f64) -> NoiseModel {
        assert!(k.is_finite() && k != 0.0, "scale factor must be finite and nonzero");
        NoiseModel {
            variance: self.variance * (k * k),
            measured_at_scale: self.measured_at_scale * k.abs(),
        }
    }

    /// Variance effective at `scale`, relative to the calibration scale.
    pub fn variance_for_scale(&self, scale: f64) -> f64 {
        let k = scale / self.measured_at_scale;
        self.variance * (k * k)
    }
}

/// Geometric temperature ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealingSchedule {
    t_initial: f64,
    t_final: f64,
    decay: f64,
    steps_per_temperature: usize,
}

impl AnnealingSchedule {
    pub fn new(t_initial: f64, t_final: f64, decay: f64, steps_per_temperature: usize) -> Result<Self> {
        if !(t_initial.is_finite() && t_initial > 0.0 && t_final.is_finite() && t_final > 0.0) {
            return Err(Error::Domain("temperatures must be positive and finite".into()));
        }
        if t_final > t_initial {
            return Err(Error::Domain(format!(
                "t_final {t_final} must not exceed t_initial {t_initial}"
            )));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Domain(format!("decay must lie in (0, 1), got {decay}")));
        }
        if steps_per_temperature == 0 {
            return Err(Error::Domain("steps_per_temperature must be at least 1".into()));
        }
        Ok(Self {
            t_initial,
            t_final,
            decay,
            steps_per_temperature,
        })
    }

    /// Conventional schedule seeded from the measurement: the starting
    /// temperature is the robust spread of the roughness field of `g`
    /// (floored at 1), decay 0.9, two steps per level, final temperature
    /// 5% of the start.
    pub fn default_for(g: &ImageGrid) -> Result<Self> {
        let lam2 = quadratic_variation(g)?;
        let lam: Vec<f64> = lam2.samples().iter().map(|v| v.sqrt()).collect();
        let t0 = robust_std(&lam).max(1.0);
        Self::new(t0, 0.05 * t0, 0.9, 2)
    }

    pub fn t_initial(&self) -> f64 {
        self.t_initial
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn steps_per_temperature(&self) -> usize {
        self.steps_per_temperature
    }

    /// Temperature of a 1-based iteration: the ladder descends one decay
    /// factor every `steps_per_temperature` iterations and holds at
    /// `t_final` once reached.
    pub fn temperature_at(&self, iteration: usize) -> f64 {
        assert!(iteration >= 1, "iterations are 1-based");
        let level = (iteration - 1) / self.steps_per_temperature;
        (self.t_initial * self.decay.powi(level as i32)).max(self.t_final)
    }
}

/// Median absolute deviation scaled to estimate a normal sigma.
fn robust_std(values: &[f64]) -> f64 {
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut devs: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(&mut devs)
}

/// Early-stop configuration for [`anneal`]; see [`stopping_indicator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingRule {
    pub window: usize,
    pub epsilon: f64,
}

pub const DEFAULT_STOP_WINDOW: usize = 5;
pub const DEFAULT_STOP_EPSILON: f64 = 1e-4;

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            window: DEFAULT_STOP_WINDOW,
            epsilon: DEFAULT_STOP_EPSILON,
        }
    }
}

/// Everything [`anneal`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaParams {
    /// Gradient step size (Eq. 5's alpha).
    pub alpha: f64,
    /// Prior weight: the ratio between penalizing noise and keeping form.
    pub beta: f64,
    pub schedule: AnnealingSchedule,
    pub max_iterations: usize,
    /// Emit a frame snapshot every this many iterations; 0 disables.
    pub snapshot_every: usize,
    /// Halve the step while the total Hamiltonian would increase at the
    /// current temperature. Off by default: the plain fixed-step update.
    pub backtracking: bool,
    /// Optional early stop; `None` runs the full iteration budget.
    pub stopping: Option<StoppingRule>,
}

impl MfaParams {
    /// Defaults: `alpha = 0.5 * variance` (the data term's curvature is
    /// at most `1/variance` for a unit-sum kernel, so this is a safe
    /// half-step), `beta = 1`, 20 iterations, schedule from `g`.
    pub fn defaults_for(g: &ImageGrid, noise: &NoiseModel) -> Result<Self> {
        Ok(Self {
            alpha: 0.5 * noise.variance(),
            beta: 1.0,
            schedule: AnnealingSchedule::default_for(g)?,
            max_iterations: 20,
            snapshot_every: 0,
            backtracking: false,
            stopping: None,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Domain(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Domain(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// One trace row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub temperature: f64,
    pub h_noise: f64,
    pub h_prior: f64,
    pub h_total: f64,
}

/// Per-iteration Hamiltonian record plus optional frame snapshots — the
/// restoration "movie" in offline form.
#[derive(Debug, Clone, Default)]
pub struct RestorationTrace {
    records: Vec<TraceRecord>,
    snapshots: Vec<(usize, ImageGrid)>,
}

pub const TRACE_CSV_HEADER: &str = "iteration,temperature,h_noise,h_prior,h_total";

impl RestorationTrace {
    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn snapshots(&self) -> &[(usize, ImageGrid)] {
        &self.snapshots
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.temperature, r.h_noise, r.h_prior, r.h_total
            ));
        }
        out
    }
}

/// The three Hamiltonian components; `h_total = h_noise + beta * h_prior`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianValue {
    pub h_noise: f64,
    pub h_prior: f64,
    pub h_total: f64,
}

// Second-difference stencils. The cross-derivative extends past the
// border by linear extrapolation (the ghost sample `f(-1) = 2f(0) - f(1)`),
// and the axis stencils vanish identically on their border lines under
// the same rule, so every affine image has exactly zero variation —
// the prior never penalizes a flat or linearly ramping region, border
// included. These work on raw sample buffers: intermediate values may
// overflow during a divergent run and the callers route that to the
// divergence guard.

fn dxx_apply(img: &ImageGrid) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 1..w - 1 {
            out[i * w + j] = img.at(i, j - 1) - 2.0 * img.at(i, j) + img.at(i, j + 1);
        }
    }
    out
}

fn dxx_adjoint(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 1..w - 1 {
            let x = v[i * w + j];
            out[i * w + j - 1] += x;
            out[i * w + j] -= 2.0 * x;
            out[i * w + j + 1] += x;
        }
    }
    out
}

fn dyy_apply(img: &ImageGrid) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for i in 1..h - 1 {
        for j in 0..w {
            out[i * w + j] = img.at(i - 1, j) - 2.0 * img.at(i, j) + img.at(i + 1, j);
        }
    }
    out
}

fn dyy_adjoint(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for i in 1..h - 1 {
        for j in 0..w {
            let x = v[i * w + j];
            out[(i - 1) * w + j] += x;
            out[i * w + j] -= 2.0 * x;
            out[(i + 1) * w + j] += x;
        }
    }
    out
}

/// Resolves an index against an axis of length `n` with linear
/// extrapolation: at most two `(index, coefficient)` reads.
#[inline]
fn resolve_ext(t: isize, n: usize) -> [(usize, f64); 2] {
    let ni = n as isize;
    if (0..ni).contains(&t) {
        [(t as usize, 1.0), (0, 0.0)]
    } else if t == -1 {
        [(0, 2.0), (1, -1.0)]
    } else {
        debug_assert_eq!(t, ni);
        [(n - 1, 2.0), (n - 2, -1.0)]
    }
}

const DXY_TAPS: [(isize, isize, f64); 4] = [
    (1, 1, 0.25),
    (1, -1, -0.25),
    (-1, 1, -0.25),
    (-1, -1, 0.25),
];

fn dxy_apply(img: &ImageGrid) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (di, dj, wgt) in DXY_TAPS {
                for (ri, ci) in resolve_ext(i as isize + di, h) {
                    if ci == 0.0 {
                        continue;
                    }
                    for (rj, cj) in resolve_ext(j as isize + dj, w) {
                        if cj == 0.0 {
                            continue;
                        }
                        acc += wgt * ci * cj * img.at(ri, rj);
                    }
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

fn dxy_adjoint(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let x = v[i * w + j];
            for (di, dj, wgt) in DXY_TAPS {
                for (ri, ci) in resolve_ext(i as isize + di, h) {
                    if ci == 0.0 {
                        continue;
                    }
                    for (rj, cj) in resolve_ext(j as isize + dj, w) {
                        if cj == 0.0 {
                            continue;
                        }
                        out[ri * w + rj] += wgt * ci * cj * x;
                    }
                }
            }
        }
    }
    out
}

fn require_stencil_size(img: &ImageGrid) -> Result<()> {
    if img.width() < 3 || img.height() < 3 {
        return Err(Error::Domain(format!(
            "second-difference stencils need at least 3x3, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Per-pixel quadratic variation `Lambda^2 = f_xx^2 + 2 f_xy^2 + f_yy^2`.
///
/// Affine images (constants and ramps) map to the zero field everywhere,
/// borders included.
pub fn quadratic_variation(img: &ImageGrid) -> Result<ImageGrid> {
    require_stencil_size(img)?;
    let a = dxx_apply(img);
    let b = dxy_apply(img);
    let c = dyy_apply(img);
    let lam2: Vec<f64> = (0..a.len())
        .map(|i| a[i] * a[i] + 2.0 * b[i] * b[i] + c[i] * c[i])
        .collect();
    ImageGrid::new(img.width(), img.height(), lam2)
}

fn check_pair(f_est: &ImageGrid, g: &ImageGrid, noise: &NoiseModel, temperature: f64) -> Result<()> {
    if !f_est.same_dims(g) {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {}x{}, measurement is {}x{}",
            f_est.width(),
            f_est.height(),
            g.width(),
            g.height()
        )));
    }
    if noise.variance() <= 0.0 {
        return Err(Error::Domain(
            "restoration requires a strictly positive noise variance".into(),
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    require_stencil_size(f_est)
}

/// Evaluates the objective at `f_est`.
///
/// `h_noise = sum ((f (*) h) - g)^2 / (2 sigma^2)` with the reflect
/// boundary; `h_prior = sum -(1/T) exp(-Lambda^2 / (2 T^2))`, each
/// summand in `[-1/T, 0)`; `h_total = h_noise + beta * h_prior`.
pub fn hamiltonian(
    f_est: &ImageGrid,
    g: &ImageGrid,
    psf: &Psf,
    noise: &NoiseModel,
    beta: f64,
    temperature: f64,
) -> Result<HamiltonianValue> {
    check_pair(f_est, g, noise, temperature)?;
    let blurred = convolve2d(f_est, psf.kernel(), BoundaryPolicy::Reflect);
    let inv_two_var = 1.0 / (2.0 * noise.variance());
    let mut h_noise = 0.0;
    for (b, m) in blurred.samples().iter().zip(g.samples()) {
        let r = b - m;
        h_noise += r * r * inv_two_var;
    }
    let a = dxx_apply(f_est);
    let b = dxy_apply(f_est);
    let c = dyy_apply(f_est);
    let inv_t = 1.0 / temperature;
    let inv_two_t2 = 1.0 / (2.0 * temperature * temperature);
    let mut h_prior = 0.0;
    for i in 0..a.len() {
        let u = a[i] * a[i] + 2.0 * b[i] * b[i] + c[i] * c[i];
        h_prior -= inv_t * (-u * inv_two_t2).exp();
    }
    Ok(HamiltonianValue {
        h_noise,
        h_prior,
        h_total: h_noise + beta * h_prior,
    })
}

/// Analytic `dH/df` at `f_est`.
///
/// Data term: the exact adjoint of the blur applied to the residual,
/// scaled by `1/sigma^2` (under a zero boundary this is convolution by
/// the flipped kernel). Prior term: the chain rule through the three
/// second-difference stencils, scattering
/// `(1/T^3) exp(-Lambda^2/(2T^2)) * {f_xx, 2 f_xy, f_yy}` back through
/// each stencil's adjoint. A gradient that overflows the finite range
/// reports [`Error::NonFiniteStep`].
pub fn gradient(
    f_est: &ImageGrid,
    g: &ImageGrid,
    psf: &Psf,
    noise: &NoiseModel,
    beta: f64,
    temperature: f64,
) -> Result<ImageGrid> {
    check_pair(f_est, g, noise, temperature)?;
    let (w, h) = (f_est.width(), f_est.height());

    let blurred = convolve2d(f_est, psf.kernel(), BoundaryPolicy::Reflect);
    let residual = ImageGrid::from_raw_unchecked(
        w,
        h,
        blurred
            .samples()
            .iter()
            .zip(g.samples())
            .map(|(b, m)| b - m)
            .collect(),
    );
    let data = convolve2d_adjoint(&residual, psf.kernel(), BoundaryPolicy::Reflect);
    let inv_var = 1.0 / noise.variance();

    let a = dxx_apply(f_est);
    let b = dxy_apply(f_est);
    let c = dyy_apply(f_est);
    let inv_two_t2 = 1.0 / (2.0 * temperature * temperature);
    // d/du of -(1/T) exp(-u / 2T^2) is exp(-u / 2T^2) / (2 T^3).
    let rho_prime_scale = 1.0 / (2.0 * temperature.powi(3));
    let n = w * h;
    let mut wa = vec![0.0; n];
    let mut wb = vec![0.0; n];
    let mut wc = vec![0.0; n];
    for i in 0..n {
        let u = a[i] * a[i] + 2.0 * b[i] * b[i] + c[i] * c[i];
        let rho_prime = rho_prime_scale * (-u * inv_two_t2).exp();
        wa[i] = 2.0 * rho_prime * a[i];
        wb[i] = 4.0 * rho_prime * b[i];
        wc[i] = 2.0 * rho_prime * c[i];
    }
    let pa = dxx_adjoint(&wa, w, h);
    let pb = dxy_adjoint(&wb, w, h);
    let pc = dyy_adjoint(&wc, w, h);

    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let v = inv_var * data.samples()[i] + beta * (pa[i] + pb[i] + pc[i]);
        if !v.is_finite() {
            return Err(Error::NonFiniteStep);
        }
        grad.push(v);
    }
    Ok(ImageGrid::from_raw_unchecked(w, h, grad))
}

/// One gradient-descent update `f - alpha * dH/df`.
pub fn mfa_step(
    f_est: &ImageGrid,
    g: &ImageGrid,
    psf: &Psf,
    noise: &NoiseModel,
    params: &MfaParams,
    temperature: f64,
) -> Result<ImageGrid> {
    params.validate()?;
    let grad = gradient(f_est, g, psf, noise, params.beta, temperature)?;
    apply_step(f_est, &grad, params.alpha).ok_or(Error::NonFiniteStep)
}

/// `f - alpha * grad`, or `None` if any sample leaves the finite range.
fn apply_step(f_est: &ImageGrid, grad: &ImageGrid, alpha: f64) -> Option<ImageGrid> {
    let mut samples = Vec::with_capacity(f_est.samples().len());
    for (f, d) in f_est.samples().iter().zip(grad.samples()) {
        let v = f - alpha * d;
        if !v.is_finite() {
            return None;
        }
        samples.push(v);
    }
    Some(ImageGrid::new(f_est.width(), f_est.height(), samples).expect("checked finite"))
}

const MAX_BACKTRACK_HALVINGS: usize = 40;

/// Runs the full annealing loop from `f = g`.
///
/// Each 1-based iteration takes one gradient step at the scheduled
/// temperature and records the post-step Hamiltonian; the ladder holds
/// at `t_final` until the iteration budget is spent. With
/// `params.backtracking` the step is halved until the total does not
/// increase at the current temperature (keeping `f` unchanged when even
/// the smallest step fails), which makes the total non-increasing within
/// each temperature level. Any non-finite sample or objective aborts
/// with the trace accumulated so far.
pub fn anneal(
    g: &ImageGrid,
    psf: &Psf,
    noise: &NoiseModel,
    params: &MfaParams,
) -> Result<(ImageGrid, RestorationTrace)> {
    params.validate()?;
    check_pair(g, g, noise, params.schedule.t_initial())?;

    let mut f = g.clone();
    let mut trace = RestorationTrace::default();

    for iteration in 1..=params.max_iterations {
        let temperature = params.schedule.temperature_at(iteration);
        let diverged = |trace: RestorationTrace| Error::Diverged {
            iteration,
            trace: Box::new(trace),
        };

        let grad = match gradient(&f, g, psf, noise, params.beta, temperature) {
            Ok(grad) => grad,
            Err(Error::NonFiniteStep) => return Err(diverged(trace)),
            Err(e) => return Err(e),
        };
        let value = if params.backtracking {
            let before = hamiltonian(&f, g, psf, noise, params.beta, temperature)?;
            if !before.h_total.is_finite() {
                return Err(diverged(trace));
            }
            let mut alpha = params.alpha;
            let mut accepted = None;
            for _ in 0..=MAX_BACKTRACK_HALVINGS {
                if let Some(candidate) = apply_step(&f, &grad, alpha) {
                    let after = hamiltonian(&candidate, g, psf, noise, params.beta, temperature)?;
                    if after.h_total.is_finite() && after.h_total <= before.h_total {
                        accepted = Some((candidate, after));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((candidate, after)) => {
                    f = candidate;
                    after
                }
                // No usable step at this temperature; hold position.
                None => before,
            }
        } else {
            match apply_step(&f, &grad, params.alpha) {
                Some(candidate) => f = candidate,
                None => return Err(diverged(trace)),
            }
            let after = hamiltonian(&f, g, psf, noise, params.beta, temperature)?;
            if !after.h_total.is_finite() {
                return Err(diverged(trace));
            }
            after
        };

        trace.records.push(TraceRecord {
            iteration,
            temperature,
            h_noise: value.h_noise,
            h_prior: value.h_prior,
            h_total: value.h_total,
        });
        if params.snapshot_every > 0 && iteration % params.snapshot_every == 0 {
            trace.snapshots.push((iteration, f.clone()));
        }
        if let Some(rule) = params.stopping {
            if stopping_indicator(&trace, rule.window, rule.epsilon) == StopDecision::Stop {
                break;
            }
        }
    }
    Ok((f, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Enhancement indicator over the trailing `window` records.
///
/// Stops on a plateau — the relative decrease of `h_total` across the
/// window falls below `epsilon` — or on over-smoothing onset, where
/// `h_noise` rises across the last three records while `h_prior` keeps
/// falling. With fewer than `window` records the answer is always
/// `Continue`.
pub fn stopping_indicator(trace: &RestorationTrace, window: usize, epsilon: f64) -> StopDecision {
    assert!(window >= 2, "window must be at least 2");
    let records = trace.records();
    if records.len() < window {
        return StopDecision::Continue;
    }
    let tail = &records[records.len() - window..];

    let first = tail.first().unwrap().h_total;
    let last = tail.last().unwrap().h_total;
    let rel_decrease = (first - last) / first.abs().max(f64::MIN_POSITIVE);
    if rel_decrease < epsilon {
        return StopDecision::Stop;
    }

    if tail.len() >= 3 {
        let onset = tail.windows(2).rev().take(2).all(|w| {
            w[1].h_noise > w[0].h_noise && w[1].h_prior <= w[0].h_prior
        });
        if onset {
            return StopDecision::Stop;
        }
    }
    StopDecision::Continue
}
