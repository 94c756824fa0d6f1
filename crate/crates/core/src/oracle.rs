//! Closed-form ground truth for the rectified-flow path
//! `x_t = (1 − t) x_0 + t ε` with isotropic Gaussian and mixture data.
//!
//! For `x_0 ~ N(μ, s² I)` the marginal is `N((1 − t) μ, Var(t) I)` with
//! `Var(t) = (1 − t)² s² + t²`. Conditioning the jointly Gaussian pair
//! `(x_0, ε)` on `x_t` gives
//!
//! ```text
//! E[x_0 | x_t] = μ + (1 − t) s² / Var(t) · (x_t − (1 − t) μ)
//! E[ε   | x_t] =          t   / Var(t) · (x_t − (1 − t) μ)
//! v(x, t) = E[ε − x_0 | x_t] = −μ + (t − (1 − t) s²) / Var(t) · (x − (1 − t) μ)
//! ```
//!
//! Writing `z = x − (1 − t) μ`, the ODE `dx/dt = v` becomes
//! `dz/dt = ½ Var'(t) / Var(t) · z`, whose solution is
//! `z_r = z_t · sqrt(Var(r) / Var(t))`. That is the exact transport map.
//!
//! Mixtures weight each component's velocity by its posterior
//! responsibility under the time-`t` marginal.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("marginal variance vanishes at t = {0}")]
    DegenerateVariance(f64),
    #[error("reference integrator exceeded {steps} steps (t = {t}, h = {h:e})")]
    StepLimit { steps: usize, t: f64, h: f64 },
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("requires t >= r, got t = {t}, r = {r}")]
    Order { t: f64, r: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `x_0 ~ N(mean, scale² I)`; `scale = 0` is a point mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, scale: f64) -> Self {
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(1 − t)² s² + t²`
    pub fn var(&self, t: f64) -> f64 {
        let a = 1.0 - t;
        a * a * self.scale * self.scale + t * t
    }

    fn checked_var(&self, t: f64) -> Result<f64, OracleError> {
        let v = self.var(t);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(OracleError::DegenerateVariance(t))
        }
    }

    /// Velocity for one point.
    pub fn velocity_row(&self, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
        if x.len() != self.dim() {
            return Err(OracleError::Dim(x.len(), self.dim()));
        }
        let var = self.checked_var(t)?;
        let k = (t - (1.0 - t) * self.scale * self.scale) / var;
        Ok(x.iter().zip(&self.mean).map(|(&xi, &m)| -m + k * (xi - (1.0 - t) * m)).collect())
    }

    /// Exact transport `t → r` for one point and the implied average velocity.
    pub fn transport_row(&self, x: &[f64], t: f64, r: f64) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
        if x.len() != self.dim() {
            return Err(OracleError::Dim(x.len(), self.dim()));
        }
        if r == t {
            return Ok((x.to_vec(), self.velocity_row(x, t)?));
        }
        let ratio = (self.var(r) / self.checked_var(t)?).sqrt();
        let xr: Vec<f64> =
            x.iter().zip(&self.mean).map(|(&xi, &m)| (1.0 - r) * m + (xi - (1.0 - t) * m) * ratio).collect();
        let u = xr.iter().zip(x).map(|(a, b)| (a - b) / (r - t)).collect();
        Ok((xr, u))
    }
}

fn map_rows(x: &Tensor, f: impl Fn(&[f64]) -> Result<Vec<f64>, OracleError>) -> Result<Tensor, OracleError> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        out.extend(f(x.row(i))?);
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("row map preserves shape"))
}

/// Marginal velocity `E[ε − x_0 | x_t = x]` for each row of `x`.
pub fn gaussian_velocity(x: &Tensor, t: f64, spec: &GaussianSpec) -> Result<Tensor, OracleError> {
    map_rows(x, |row| spec.velocity_row(row, t))
}

/// Exact `(x_r, u_avg)` for each row of `x`.
pub fn gaussian_transport(x: &Tensor, t: f64, r: f64, spec: &GaussianSpec) -> Result<(Tensor, Tensor), OracleError> {
    let xr = map_rows(x, |row| spec.transport_row(row, t, r).map(|p| p.0))?;
    let u = map_rows(x, |row| spec.transport_row(row, t, r).map(|p| p.1))?;
    Ok((xr, u))
}

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, scales: Vec<f64>) -> Result<Self, OracleError> {
        let k = weights.len();
        if k == 0 || means.len() != k || scales.len() != k {
            return Err(OracleError::InvalidMixture("component counts differ".into()));
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(OracleError::InvalidMixture("weights must be nonnegative and sum to 1".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) || scales.iter().any(|&s| s < 0.0) {
            return Err(OracleError::InvalidMixture("inconsistent means or negative scale".into()));
        }
        Ok(Self { weights, means, scales })
    }

    /// `k` equal-weight modes on a circle of `radius`, first mode on the +x axis.
    pub fn ring(k: usize, radius: f64, scale: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { weights: vec![1.0 / k as f64; k], means, scales: vec![scale; k] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn component(&self, k: usize) -> GaussianSpec {
        GaussianSpec::new(self.means[k].clone(), self.scales[k])
    }

    /// Posterior component probabilities at time `t`, via log-sum-exp.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
        let d = x.len() as f64;
        let mut logs = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let c = self.component(k);
            let var = c.checked_var(t)?;
            let sq: f64 = x.iter().zip(&c.mean).map(|(&xi, &m)| (xi - (1.0 - t) * m).powi(2)).sum();
            logs.push(self.weights[k].ln() - 0.5 * d * var.ln() - 0.5 * sq / var);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(logs.iter().map(|l| (l - max).exp() / z).collect())
    }

    pub fn velocity_row(&self, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
        let resp = self.responsibilities(x, t)?;
        let mut v = vec![0.0; x.len()];
        for (k, &p) in resp.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, vk) in v.iter_mut().zip(self.component(k).velocity_row(x, t)?) {
                *o += p * vk;
            }
        }
        Ok(v)
    }
}

/// Posterior-weighted mixture velocity for each row of `x`.
pub fn gmm_velocity(x: &Tensor, t: f64, spec: &GmmSpec) -> Result<Tensor, OracleError> {
    map_rows(x, |row| spec.velocity_row(row, t))
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

pub const MAX_ODE_STEPS: usize = 1_000_000;

/// Outcome of an adaptive integration.
#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub x: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Adaptive embedded Runge–Kutta integration of `dx/dτ = v(x, τ)` from `t`
/// to `r` (either direction). Each accepted step has estimated local error
/// (max-norm) at most `tol`; step sizes follow a PI controller.
pub fn reference_ode(
    v: &dyn Fn(&[f64], f64) -> Vec<f64>,
    x: &[f64],
    t: f64,
    r: f64,
    tol: f64,
) -> Result<OdeSolution, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::BadTolerance);
    }
    let mut sol = OdeSolution { x: x.to_vec(), accepted: 0, rejected: 0, evaluations: 0 };
    if t == r {
        return Ok(sol);
    }
    let dir = (r - t).signum();
    let span = (r - t).abs();
    let mut tau = t;
    let mut h = dir * (span * 1e-2).min(tol.powf(0.2)).max(1e-12);
    let mut err_prev = 1.0f64;
    let n = x.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    k[0] = v(&sol.x, tau);
    sol.evaluations += 1;
    let mut stage = vec![0.0; n];

    while (r - tau) * dir > 0.0 {
        if sol.accepted + sol.rejected >= MAX_ODE_STEPS {
            return Err(OracleError::StepLimit { steps: MAX_ODE_STEPS, t: tau, h });
        }
        let last = (tau + h - r) * dir >= 0.0;
        if last {
            h = r - tau;
        }
        for s in 1..7 {
            for j in 0..n {
                let mut acc = sol.x[j];
                for (m, km) in k.iter().enumerate().take(s) {
                    acc += h * A[s][m] * km[j];
                }
                stage[j] = acc;
            }
            k[s] = v(&stage, tau + C[s] * h);
            sol.evaluations += 1;
        }
        // k[6] was evaluated at the 5th-order solution (FSAL).
        let mut err = 0.0f64;
        for j in 0..n {
            let e: f64 = (0..7).map(|m| (B5[m] - B4[m]) * k[m][j]).sum::<f64>() * h;
            err = err.max(e.abs());
        }
        let ratio = err / tol;
        if ratio <= 1.0 {
            sol.x.clone_from(&stage);
            tau = if last { r } else { tau + h };
            k[0] = k[6].clone();
            sol.accepted += 1;
            let fac = if ratio == 0.0 { 5.0 } else { 0.9 * ratio.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0) };
            err_prev = ratio.max(1e-4);
            h *= fac.clamp(0.2, 5.0);
        } else {
            sol.rejected += 1;
            h *= (0.9 * ratio.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok(sol)
}

/// Squared-norm discretization error of a one-jump flow-map update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrReport {
    pub err: f64,
    pub tol: f64,
    pub evaluations: usize,
}

/// `‖∫_t^r v dτ − (r − t) u(x, t, r)‖²` with the integral taken from
/// [`reference_ode`].
pub fn discretization_error(
    u_map: &dyn Fn(&[f64], f64, f64) -> Vec<f64>,
    v: &dyn Fn(&[f64], f64) -> Vec<f64>,
    x: &[f64],
    t: f64,
    r: f64,
    tol: f64,
) -> Result<ErrReport, OracleError> {
    if t < r {
        return Err(OracleError::Order { t, r });
    }
    if t == r {
        return Ok(ErrReport { err: 0.0, tol, evaluations: 0 });
    }
    let sol = reference_ode(v, x, t, r, tol)?;
    let u = u_map(x, t, r);
    let err = sol
        .x
        .iter()
        .zip(x)
        .zip(&u)
        .map(|((xr, x0), ui)| {
            let d = (xr - x0) - (r - t) * ui;
            d * d
        })
        .sum();
    Ok(ErrReport { err, tol, evaluations: sol.evaluations + 1 })
}

/// Writes `t,r,err` rows for every grid pair with `t >= r`.
pub fn write_err_sweep_csv(
    out: &mut dyn Write,
    u_map: &dyn Fn(&[f64], f64, f64) -> Vec<f64>,
    v: &dyn Fn(&[f64], f64) -> Vec<f64>,
    x: &[f64],
    grid: &[f64],
    tol: f64,
) -> Result<(), OracleError> {
    writeln!(out, "t,r,err")?;
    for &t in grid {
        for &r in grid.iter().filter(|&&r| r <= t) {
            let rep = discretization_error(u_map, v, x, t, r, tol)?;
            writeln!(out, "{t},{r},{}", rep.err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_fork;

    fn row(xs: &[f64]) -> Tensor {
        Tensor::from_rows(&[xs.to_vec()]).unwrap()
    }

    #[test]
    fn standard_normal_at_half_has_zero_velocity() {
        let spec = GaussianSpec::new(vec![0.0, 0.0], 1.0);
        let v = gaussian_velocity(&row(&[1.3, -0.4]), 0.5, &spec).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn velocity_at_noise_end() {
        let spec = GaussianSpec::new(vec![2.0], 1.0);
        let v = gaussian_velocity(&row(&[3.0]), 1.0, &spec).unwrap();
        assert!((v.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn point_mass_is_straight_line_field() {
        let spec = GaussianSpec::new(vec![1.5, -0.5], 0.0);
        for t in [0.2, 0.6, 1.0] {
            let x = [0.7, 0.9];
            let v = spec.velocity_row(&x, t).unwrap();
            for j in 0..2 {
                let want = (x[j] - spec.mean[j]) / t;
                assert!((v[j] - want).abs() < 1e-12);
            }
        }
        assert!(matches!(spec.velocity_row(&[0.0, 0.0], 0.0), Err(OracleError::DegenerateVariance(_))));
    }

    /// Monte-Carlo regression of ε − x_0 on x_t in one dimension.
    #[test]
    fn velocity_matches_monte_carlo_regression() {
        let spec = GaussianSpec::new(vec![2.0], 0.7);
        let t = 0.35;
        let mut rng = rng_fork(5, "mc");
        let n = 400_000;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x0 = 2.0 + 0.7 * rng.normal();
            let e = rng.normal();
            let xt = (1.0 - t) * x0 + t * e;
            let y = e - x0;
            sx += xt;
            sy += y;
            sxx += xt * xt;
            sxy += xt * y;
        }
        let nf = n as f64;
        let slope = (sxy / nf - sx / nf * sy / nf) / (sxx / nf - (sx / nf).powi(2));
        let icpt = sy / nf - slope * sx / nf;
        for x in [1.0, 1.5, 2.0] {
            let want = spec.velocity_row(&[x], t).unwrap()[0];
            assert!((slope * x + icpt - want).abs() < 0.02, "{x}: {} vs {want}", slope * x + icpt);
        }
    }

    #[test]
    fn transport_examples() {
        let spec = GaussianSpec::new(vec![0.0, 0.0], 1.0);
        let (x0, u) = spec.transport_row(&[0.4, -1.0], 1.0, 0.0).unwrap();
        assert!((x0[0] - 0.4).abs() < 1e-15 && (x0[1] + 1.0).abs() < 1e-15);
        assert!(u.iter().all(|v| v.abs() < 1e-15));

        let pm = GaussianSpec::new(vec![0.0], 0.0);
        let (x0, u) = pm.transport_row(&[2.0], 1.0, 0.0).unwrap();
        assert_eq!(x0, vec![0.0]);
        assert_eq!(u, vec![2.0]);

        let g = GaussianSpec::new(vec![1.0, 2.0], 0.5);
        let (_, u) = g.transport_row(&[0.3, 0.1], 0.4, 0.4).unwrap();
        assert_eq!(u, g.velocity_row(&[0.3, 0.1], 0.4).unwrap());
    }

    #[test]
    fn transport_semigroup() {
        let g = GaussianSpec::new(vec![2.0, -1.0], 0.5);
        let x = [0.3, 1.7];
        for (t, m, r) in [(1.0, 0.5, 0.0), (0.9, 0.3, 0.1), (0.6, 0.55, 0.2)] {
            let direct = g.transport_row(&x, t, r).unwrap().0;
            let mid = g.transport_row(&x, t, m).unwrap().0;
            let two = g.transport_row(&mid, m, r).unwrap().0;
            for j in 0..2 {
                assert!((direct[j] - two[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_is_derivative_of_transport() {
        let g = GaussianSpec::new(vec![2.0, -1.0], 0.5);
        let x = [0.3, 1.7];
        for t in [0.2, 0.5, 0.9] {
            let h = 1e-6;
            let a = g.transport_row(&x, t, t + h).unwrap().0;
            let b = g.transport_row(&x, t, t - h).unwrap().0;
            let v = g.velocity_row(&x, t).unwrap();
            for j in 0..2 {
                let fd = (a[j] - b[j]) / (2.0 * h);
                assert!((fd - v[j]).abs() <= 1e-6 * v[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn mixture_degenerate_cases() {
        let single = GmmSpec::new(vec![1.0], vec![vec![1.0, 2.0]], vec![0.3]).unwrap();
        let x = [0.5, -0.2];
        assert_eq!(single.velocity_row(&x, 0.4).unwrap(), single.component(0).velocity_row(&x, 0.4).unwrap());
        let sym = GmmSpec::new(vec![0.5, 0.5], vec![vec![1.5, 0.0], vec![-1.5, 0.0]], vec![0.3, 0.3]).unwrap();
        for t in [0.1, 0.5, 0.9] {
            let v = sym.velocity_row(&[0.0, 0.0], t).unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-12));
        }
        assert!(GmmSpec::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let ring = GmmSpec::ring(8, 4.0, 0.3);
        for (x, t) in [([0.0, 0.0], 0.5), ([4.0, 0.1], 0.01), ([50.0, -50.0], 0.2)] {
            let p = ring.responsibilities(&x, t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ode_constant_and_zero_fields() {
        let c = [0.5, -2.0];
        let sol = reference_ode(&|_, _| c.to_vec(), &[1.0, 1.0], 0.8, 0.1, 1e-10).unwrap();
        for j in 0..2 {
            assert!((sol.x[j] - (1.0 + (0.1 - 0.8) * c[j])).abs() < 1e-12);
        }
        let sol = reference_ode(&|x, _| vec![0.0; x.len()], &[3.0], 1.0, 0.0, 1e-10).unwrap();
        assert_eq!(sol.x, vec![3.0]);
    }

    #[test]
    fn ode_matches_transport() {
        let g = GaussianSpec::new(vec![2.0, 2.0], 0.5);
        let x = [0.4, -1.3];
        let tol = 1e-10;
        let sol = reference_ode(&|y, tau| g.velocity_row(y, tau).unwrap(), &x, 1.0, 0.0, tol).unwrap();
        let exact = g.transport_row(&x, 1.0, 0.0).unwrap().0;
        for j in 0..2 {
            assert!((sol.x[j] - exact[j]).abs() < 10.0 * tol, "{} vs {}", sol.x[j], exact[j]);
        }
    }

    #[test]
    fn euler_surrogate_error_shrinks_with_gap() {
        let g = GaussianSpec::new(vec![2.0, 2.0], 0.5);
        let x = [0.4, -1.3];
        let v = |y: &[f64], tau: f64| g.velocity_row(y, tau).unwrap();
        let frozen = |y: &[f64], t: f64, _r: f64| g.velocity_row(y, t).unwrap();
        let mut prev = f64::INFINITY;
        for r in [0.0, 0.5, 0.9, 0.99] {
            let e = discretization_error(&frozen, &v, &x, 1.0, r, 1e-10).unwrap().err;
            assert!(e > 0.0 && e < prev);
            prev = e;
        }
        assert_eq!(discretization_error(&frozen, &v, &x, 0.5, 0.5, 1e-10).unwrap().err, 0.0);
        assert!(discretization_error(&frozen, &v, &x, 0.2, 0.5, 1e-10).is_err());
    }
}
