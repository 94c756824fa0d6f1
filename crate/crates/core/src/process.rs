//! Forward noising process, velocity targets and timestep proposals.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`):
//! `x_t = α_t x_0 + σ_t ε`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("time {0} outside the open interval (0, 1)")]
    OutsideUnitInterval(f64),
    #[error("time shift factor must be positive, got {0}")]
    NonPositiveShift(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interpolation coefficients with `α_0 = σ_1 = 1` and `α_1 = σ_0 = 0`.
pub trait InterpolantSchedule: Send + Sync {
    fn alpha(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;
    fn d_alpha(&self, t: f64) -> f64;
    fn d_sigma(&self, t: f64) -> f64;

    /// Closed-form rectified-flow specializations are used when this is true.
    fn is_rectified(&self) -> bool {
        false
    }
}

/// `α_t = 1 − t`, `σ_t = t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RectifiedFlow;

impl InterpolantSchedule for RectifiedFlow {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn sigma(&self, t: f64) -> f64 {
        t
    }
    fn d_alpha(&self, _t: f64) -> f64 {
        -1.0
    }
    fn d_sigma(&self, _t: f64) -> f64 {
        1.0
    }
    fn is_rectified(&self) -> bool {
        true
    }
}

/// Trigonometric path `α_t = cos(πt/2)`, `σ_t = sin(πt/2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule;

impl InterpolantSchedule for CosineSchedule {
    fn alpha(&self, t: f64) -> f64 {
        if t == 1.0 {
            0.0
        } else {
            (std::f64::consts::FRAC_PI_2 * t).cos()
        }
    }
    fn sigma(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn d_alpha(&self, t: f64) -> f64 {
        -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn d_sigma(&self, t: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
    }
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<(), ProcessError> {
    if a.shape() != b.shape() {
        return Err(ProcessError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `α_t x0 + σ_t eps`
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64, sched: &dyn InterpolantSchedule) -> Result<Tensor, ProcessError> {
    check_shapes(x0, eps)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.zip_map(eps, |x, e| a * x + s * e))
}

/// `α'_t x0 + σ'_t eps`
pub fn velocity_target(
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
    sched: &dyn InterpolantSchedule,
) -> Result<Tensor, ProcessError> {
    check_shapes(x0, eps)?;
    let (da, ds) = (sched.d_alpha(t), sched.d_sigma(t));
    Ok(x0.zip_map(eps, |x, e| da * x + ds * e))
}

/// Row-wise versions with one time per row of `[n, d]` tensors.
pub fn interpolate_rows(
    x0: &Tensor,
    eps: &Tensor,
    t: &[f64],
    sched: &dyn InterpolantSchedule,
) -> Result<(Tensor, Tensor), ProcessError> {
    check_shapes(x0, eps)?;
    assert_eq!(t.len(), x0.rows(), "one time per row");
    let mut xt = x0.clone();
    let mut v = x0.clone();
    let d = x0.cols();
    for (i, &ti) in t.iter().enumerate() {
        let (a, s, da, ds) = (sched.alpha(ti), sched.sigma(ti), sched.d_alpha(ti), sched.d_sigma(ti));
        for j in 0..d {
            let (x, e) = (x0.row(i)[j], eps.row(i)[j]);
            xt.row_mut(i)[j] = a * x + s * e;
            v.row_mut(i)[j] = da * x + ds * e;
        }
    }
    Ok((xt, v))
}

/// Sampled times are kept this far from the endpoints.
pub const TIME_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamp_time(t: f64) -> f64 {
    t.clamp(TIME_CLAMP, 1.0 - TIME_CLAMP)
}

/// Logit-normal draw with location `mu` and unit scale.
pub fn sample_time_fm(rng: &mut RngStream, mu: f64) -> f64 {
    clamp_time(sigmoid(mu + rng.normal()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub t: f64,
    pub r: f64,
}

/// Max and min of two independent logit-normal draws. Ties pass through.
pub fn sample_time_pair(rng: &mut RngStream, mu1: f64, mu2: f64) -> TimePair {
    let a = sample_time_fm(rng, mu1);
    let b = sample_time_fm(rng, mu2);
    TimePair { t: a.max(b), r: a.min(b) }
}

/// Timestep proposal parameters (unit logit-normal scales).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeProposal {
    pub mu_fm: f64,
    pub mu_mf: (f64, f64),
}

impl TimeProposal {
    /// Pair proposal of the original mean-flow recipe.
    pub const MEANFLOW_BASELINE: (f64, f64) = (-0.4, -0.4);
}

impl Default for TimeProposal {
    fn default() -> Self {
        Self { mu_fm: 0.0, mu_mf: (0.4, -1.2) }
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Logit-normal density with location `mu`, unit scale.
pub fn logit_normal_pdf(z: f64, mu: f64) -> f64 {
    let l = (z / (1.0 - z)).ln();
    std_normal_pdf(l - mu) / (z * (1.0 - z))
}

/// Densities of `max(X1, X2)` and `min(X1, X2)` for independent
/// `Xi ~ LogitNormal(mu_i, 1)`.
pub fn order_stat_densities(z: f64, mu1: f64, mu2: f64) -> Result<(f64, f64), ProcessError> {
    if !(z > 0.0 && z < 1.0) {
        return Err(ProcessError::OutsideUnitInterval(z));
    }
    let l = (z / (1.0 - z)).ln();
    let (p1, p2) = (std_normal_pdf(l - mu1), std_normal_pdf(l - mu2));
    let (c1, c2) = (std_normal_cdf(l - mu1), std_normal_cdf(l - mu2));
    let jac = z * (1.0 - z);
    let f_max = (p1 * c2 + p2 * c1) / jac;
    let f_min = (p1 * (1.0 - c2) + p2 * (1.0 - c1)) / jac;
    Ok((f_max, f_min))
}

/// Writes `z,f_max,f_min` rows on a uniform interior grid of `n` points.
pub fn write_density_csv(out: &mut dyn Write, mu1: f64, mu2: f64, n: usize) -> Result<(), ProcessError> {
    writeln!(out, "z,f_max,f_min")?;
    for i in 0..n {
        let z = (i as f64 + 0.5) / n as f64;
        let (fmax, fmin) = order_stat_densities(z, mu1, mu2)?;
        writeln!(out, "{z},{fmax},{fmin}")?;
    }
    Ok(())
}

/// `s t / (1 + (s − 1) t)`
pub fn time_shift(t: f64, s: f64) -> Result<f64, ProcessError> {
    if !(s > 0.0) {
        return Err(ProcessError::NonPositiveShift(s));
    }
    Ok(s * t / (1.0 + (s - 1.0) * t))
}
