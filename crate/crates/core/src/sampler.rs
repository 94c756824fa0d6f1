//! Few-step and many-step samplers walking from noise (`t = 1`) to data (`t = 0`).
//!
//! Flow samplers query `v(x, t) = u(x, t, t)`; map samplers query the average
//! velocity `u(x, t, r)` over a whole step. Every trajectory owns an RNG
//! stream `sample/{i}`, so results do not depend on batch composition.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{forward, Arch, Label, NetConfig, NetError, Params};
use crate::numerics::{rng_fork, RngStream, Tensor};
use crate::oracle::{GaussianSpec, GmmSpec, OracleError};
use crate::process::{time_shift, InterpolantSchedule, RectifiedFlow};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("step must go backwards in time, got t = {t}, r = {r}")]
    StepOrder { t: f64, r: f64 },
    #[error("score is singular at t = {0}")]
    Singular(f64),
    #[error("sampler {kind:?} needs a flow-map evaluator")]
    NotAMap { kind: SamplerKind },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    FlowEuler,
    FlowHeun,
    FlowSde,
    MapEuler,
    Restart,
    CtmGamma,
}

impl SamplerKind {
    pub fn needs_map(self) -> bool {
        matches!(self, Self::MapEuler | Self::Restart | Self::CtmGamma)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::FlowSde | Self::Restart | Self::CtmGamma)
    }
}

/// Diffusion coefficient `w_t` of the reverse SDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "k")]
pub enum Diffusion {
    Zero,
    Constant(f64),
    /// `w_t = k t`
    Linear(f64),
}

impl Diffusion {
    pub fn at(self, t: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant(k) => k,
            Self::Linear(k) => k * t,
        }
    }
}

fn default_steps() -> usize {
    1
}
fn default_one() -> f64 {
    1.0
}
fn default_interval() -> (f64, f64) {
    (0.0, 1.0)
}
fn default_diffusion() -> Diffusion {
    Diffusion::Linear(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_one")]
    pub shift: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub cfg_scale: f64,
    /// CFG is applied only while the evaluation time lies in this interval.
    #[serde(default = "default_interval")]
    pub interval: (f64, f64),
    #[serde(default = "default_diffusion")]
    pub diffusion: Diffusion,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            shift: 1.0,
            gamma: 0.0,
            cfg_scale: 1.0,
            interval: default_interval(),
            diffusion: default_diffusion(),
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if !(self.shift > 0.0) {
            return bad(format!("shift must be positive, got {}", self.shift));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.cfg_scale >= 1.0) {
            return bad(format!("cfg scale must be >= 1, got {}", self.cfg_scale));
        }
        let (lo, hi) = self.interval;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("bad guidance interval [{lo}, {hi}]"));
        }
        if self.diffusion.at(1.0) < 0.0 || self.diffusion.at(0.5) < 0.0 {
            return bad("diffusion coefficient must be nonnegative".into());
        }
        Ok(())
    }
}

/// Decreasing times `1 = t_0 > … > t_steps = 0`, uniformly spaced then shifted.
pub fn make_time_grid(steps: usize, shift: f64) -> Result<Vec<f64>, SamplerError> {
    if steps < 1 {
        return Err(SamplerError::InvalidConfig("steps must be at least 1".into()));
    }
    let mut grid = Vec::with_capacity(steps + 1);
    grid.push(1.0);
    for i in 1..steps {
        let u = 1.0 - i as f64 / steps as f64;
        grid.push(time_shift(u, shift).map_err(|e| SamplerError::InvalidConfig(e.to_string()))?);
    }
    grid.push(0.0);
    Ok(grid)
}

/// `∇ log p_t(x)` from a velocity: `(α v − α' x) / (σ (α' σ − α σ'))`.
pub fn score_from_velocity(
    v: &Tensor,
    x: &Tensor,
    t: f64,
    sched: &dyn InterpolantSchedule,
) -> Result<Tensor, SamplerError> {
    let (a, s, da, ds) = (sched.alpha(t), sched.sigma(t), sched.d_alpha(t), sched.d_sigma(t));
    let denom = s * (da * s - a * ds);
    if !(t > 0.0) || denom == 0.0 {
        return Err(SamplerError::Singular(t));
    }
    Ok(v.zip_map(x, |vi, xi| (a * vi - da * xi) / denom))
}

/// `v_uncond + scale (v_cond − v_uncond)`
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Tensor {
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Anything that can report `u(x, t, r, y)` for a batch at shared times.
pub trait Evaluator {
    fn eval(&self, x: &Tensor, t: f64, r: f64, y: &[Label]) -> Result<Tensor, SamplerError>;

    /// True when `r ≠ t` is meaningful.
    fn is_map(&self) -> bool;

    /// True when labels change the output (CFG is skipped otherwise).
    fn is_conditional(&self) -> bool {
        false
    }
}

/// A trained network.
pub struct NetModel<'a> {
    pub params: &'a Params,
    pub cfg: &'a NetConfig,
}

impl Evaluator for NetModel<'_> {
    fn eval(&self, x: &Tensor, t: f64, r: f64, y: &[Label]) -> Result<Tensor, SamplerError> {
        let n = x.rows();
        Ok(forward(self.params, self.cfg, x, &vec![t; n], &vec![r; n], y)?)
    }

    fn is_map(&self) -> bool {
        self.cfg.arch != Arch::Flow
    }

    fn is_conditional(&self) -> bool {
        true
    }
}

/// Instantaneous Gaussian velocity; `r` is ignored.
pub struct GaussianFlow(pub GaussianSpec);

impl Evaluator for GaussianFlow {
    fn eval(&self, x: &Tensor, t: f64, _r: f64, _y: &[Label]) -> Result<Tensor, SamplerError> {
        Ok(crate::oracle::gaussian_velocity(x, t, &self.0)?)
    }
    fn is_map(&self) -> bool {
        false
    }
}

/// Exact Gaussian average velocity over `[r, t]`.
pub struct GaussianMap(pub GaussianSpec);

impl Evaluator for GaussianMap {
    fn eval(&self, x: &Tensor, t: f64, r: f64, _y: &[Label]) -> Result<Tensor, SamplerError> {
        Ok(crate::oracle::gaussian_transport(x, t, r, &self.0)?.1)
    }
    fn is_map(&self) -> bool {
        true
    }
}

/// Mixture velocity; `r` is ignored.
pub struct GmmFlow(pub GmmSpec);

impl Evaluator for GmmFlow {
    fn eval(&self, x: &Tensor, t: f64, _r: f64, _y: &[Label]) -> Result<Tensor, SamplerError> {
        Ok(crate::oracle::gmm_velocity(x, t, &self.0)?)
    }
    fn is_map(&self) -> bool {
        false
    }
}

/// Evaluator wrapper that applies CFG and counts evaluations per sample.
pub struct Guided<'a> {
    inner: &'a dyn Evaluator,
    scale: f64,
    interval: (f64, f64),
    nfe: usize,
}

impl<'a> Guided<'a> {
    pub fn new(inner: &'a dyn Evaluator, cfg: &SamplerConfig) -> Self {
        Self { inner, scale: cfg.cfg_scale, interval: cfg.interval, nfe: 0 }
    }

    pub fn nfe(&self) -> usize {
        self.nfe
    }

    pub fn eval(&mut self, x: &Tensor, t: f64, r: f64, y: &[Label]) -> Result<Tensor, SamplerError> {
        let guide = self.scale != 1.0
            && self.inner.is_conditional()
            && self.interval.0 <= t
            && t <= self.interval.1
            && y.iter().any(Option::is_some);
        if !guide {
            self.nfe += 1;
            return self.inner.eval(x, t, r, y);
        }
        self.nfe += 2;
        let n = x.rows();
        let x2 = Tensor::concat_rows(&[x, x]);
        let y2: Vec<Label> = y.iter().copied().chain(std::iter::repeat_n(None, n)).collect();
        let both = self.inner.eval(&x2, t, r, &y2)?;
        let idx: Vec<usize> = (0..n).collect();
        let idx2: Vec<usize> = (n..2 * n).collect();
        Ok(cfg_velocity(&both.select_rows(&idx), &both.select_rows(&idx2), self.scale))
    }
}

fn noise(rngs: &mut [RngStream], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * d);
    for rng in rngs.iter_mut() {
        data.extend((0..d).map(|_| rng.normal()));
    }
    Tensor::new(vec![rngs.len(), d], data).expect("noise shape")
}

/// `x + (r − t) u`
fn euler(x: &Tensor, u: &Tensor, t: f64, r: f64) -> Tensor {
    let h = r - t;
    x.zip_map(u, |xi, ui| xi + h * ui)
}

/// `a x + b ε`
fn renoise(x: &Tensor, a: f64, b: f64, rngs: &mut [RngStream]) -> Tensor {
    let eps = noise(rngs, x.cols());
    x.zip_map(&eps, |xi, ei| a * xi + b * ei)
}

/// One transition `t → r` of `kind`. `rngs` holds one stream per row.
#[allow(clippy::too_many_arguments)]
pub fn sampler_step(
    cfg: &SamplerConfig,
    model: &mut Guided,
    x: &Tensor,
    t: f64,
    r: f64,
    y: &[Label],
    rngs: &mut [RngStream],
    sched: &dyn InterpolantSchedule,
) -> Result<Tensor, SamplerError> {
    if !(t > r && r >= 0.0) {
        return Err(SamplerError::StepOrder { t, r });
    }
    if cfg.kind.needs_map() && !model.inner.is_map() {
        return Err(SamplerError::NotAMap { kind: cfg.kind });
    }
    match cfg.kind {
        SamplerKind::FlowEuler => {
            let v = model.eval(x, t, t, y)?;
            Ok(euler(x, &v, t, r))
        }
        SamplerKind::FlowHeun => {
            let v1 = model.eval(x, t, t, y)?;
            let x1 = euler(x, &v1, t, r);
            if r == 0.0 {
                return Ok(x1);
            }
            let v2 = model.eval(&x1, r, r, y)?;
            let h = 0.5 * (r - t);
            Ok(x.zip_map(&v1.add(&v2), |xi, s| xi + h * s))
        }
        SamplerKind::FlowSde => {
            let v = model.eval(x, t, t, y)?;
            let w = cfg.diffusion.at(t);
            if r == 0.0 || w == 0.0 {
                return Ok(euler(x, &v, t, r));
            }
            let score = score_from_velocity(&v, x, t, sched)?;
            let drift = v.zip_map(&score, |vi, si| vi - 0.5 * w * si);
            let mean = euler(x, &drift, t, r);
            Ok(renoise(&mean, 1.0, (w * (t - r)).sqrt(), rngs))
        }
        SamplerKind::MapEuler => {
            let u = model.eval(x, t, r, y)?;
            Ok(euler(x, &u, t, r))
        }
        SamplerKind::Restart => {
            let u = model.eval(x, t, 0.0, y)?;
            let x0 = euler(x, &u, t, 0.0);
            if r == 0.0 {
                return Ok(x0);
            }
            Ok(renoise(&x0, sched.alpha(r), sched.sigma(r), rngs))
        }
        SamplerKind::CtmGamma => {
            let g = cfg.gamma;
            let s = (1.0 - g) * r / (1.0 - g * r);
            let u = model.eval(x, t, s, y)?;
            let xs = euler(x, &u, t, s);
            let (a, b) = if sched.is_rectified() {
                (1.0 - g * r, g * r)
            } else {
                let ratio = sched.alpha(r) / sched.alpha(s);
                (ratio, sched.sigma(r) - sched.sigma(s) * ratio)
            };
            if b == 0.0 {
                return Ok(xs);
            }
            Ok(renoise(&xs, a, b, rngs))
        }
    }
}

/// Labels for generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolicy {
    Fixed(usize),
    Uniform,
    Unconditional,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub samples: Tensor,
    pub labels: Vec<Label>,
    /// Network evaluations per sample.
    pub nfe: usize,
    /// States at every grid time, starting with the initial noise.
    pub trajectory: Option<Vec<Tensor>>,
}

/// Draws `n` samples. Sample `i` uses stream `sample/{i}` of `seed` for its
/// label, its initial noise and every later noise draw.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &dyn Evaluator,
    n: usize,
    dim: usize,
    policy: LabelPolicy,
    num_classes: usize,
    cfg: &SamplerConfig,
    seed: u64,
    keep_trajectory: bool,
) -> Result<Generated, SamplerError> {
    cfg.validate()?;
    if cfg.kind.needs_map() && !model.is_map() {
        return Err(SamplerError::NotAMap { kind: cfg.kind });
    }
    let sched = RectifiedFlow;
    let grid = make_time_grid(cfg.steps, cfg.shift)?;
    let mut rngs: Vec<RngStream> = (0..n).map(|i| rng_fork(seed, &format!("sample/{i}"))).collect();
    let labels: Vec<Label> = rngs
        .iter_mut()
        .map(|rng| match policy {
            LabelPolicy::Fixed(c) => Some(c),
            LabelPolicy::Uniform if num_classes > 0 => Some(rng.below(num_classes)),
            _ => None,
        })
        .collect();
    let mut x = noise(&mut rngs, dim);
    let mut traj = keep_trajectory.then(|| vec![x.clone()]);
    let mut guided = Guided::new(model, cfg);
    for w in grid.windows(2) {
        x = sampler_step(cfg, &mut guided, &x, w[0], w[1], &labels, &mut rngs, &sched)?;
        if let Some(tr) = traj.as_mut() {
            tr.push(x.clone());
        }
    }
    Ok(Generated { samples: x, labels, nfe: guided.nfe(), trajectory: traj })
}

/// Long-format trajectory: `step,t,index,x0,x1,…`.
pub fn write_trajectory_csv(path: &Path, grid: &[f64], traj: &[Tensor]) -> Result<(), SamplerError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = traj.first().map_or(0, Tensor::cols);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(out, "step,t,index,{}", header.join(","))?;
    for (k, (x, t)) in traj.iter().zip(grid).enumerate() {
        for i in 0..x.rows() {
            let coords: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{k},{t:?},{i},{}", coords.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}
