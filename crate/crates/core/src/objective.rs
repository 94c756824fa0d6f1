//! Training targets and losses for flow and flow-map networks.
//!
//! The flow-matching term regresses `u(x_t, t, t)` on a (possibly guided)
//! velocity target. The mean-flow term regresses `u(x_t, t, r)` on
//! `v + (r − t) du/dt`, where `du/dt = ∂_x u · v + ∂_t u` comes from one
//! forward-mode pass with tangents `(v, 1, 0)` on `(x, t, r)`. Both targets
//! are constants of the graph, so no gradient flows through them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{
    self, forward, forward_graph, time_column, BoundParams, Label, NetConfig, NetError, ParamEntry, Params,
};
use crate::numerics::{Graph, NumericsError, RngStream, Tensor, Var};
use crate::process::{interpolate_rows, sample_time_fm, sample_time_pair, InterpolantSchedule, TimeProposal};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {value}; {report}")]
    NonFiniteLoss { value: f64, report: String },
}

fn default_omega() -> f64 {
    0.6
}
fn default_interval() -> (f64, f64) {
    (0.0, 0.7)
}
fn default_dropout() -> f64 {
    0.1
}

/// Model guidance applied to training targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_interval")]
    pub interval: (f64, f64),
    #[serde(default = "default_dropout")]
    pub class_dropout: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: default_omega(), interval: default_interval(), class_dropout: default_dropout() }
    }
}

impl GuidanceConfig {
    /// No guidance and no label dropout.
    pub fn off() -> Self {
        Self { omega: 0.0, interval: (0.0, 1.0), class_dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let (lo, hi) = self.interval;
        if !(0.0..1.0).contains(&self.omega) {
            return Err(ObjectiveError::InvalidConfig(format!("omega must lie in [0, 1), got {}", self.omega)));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(ObjectiveError::InvalidConfig(format!("bad guidance interval [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "class dropout must lie in [0, 1], got {}",
                self.class_dropout
            )));
        }
        Ok(())
    }

    pub fn in_interval(&self, t: f64) -> bool {
        self.interval.0 <= t && t <= self.interval.1
    }

    /// Classifier-free guidance scale that model guidance with `omega` imitates.
    pub fn equivalent_cfg_scale(&self) -> f64 {
        1.0 / (1.0 - self.omega)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `log(e^{−φ} L + c) + φ/2`, or `log(L + c)` without adaptation.
    Cauchy,
    /// `½(e^{−φ} L + φ)`, or plain `L` without adaptation.
    Gaussian,
}

fn default_c() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_true")]
    pub adaptive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Cauchy, c: 1.0, adaptive: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.c > 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!("c must be positive, got {}", self.c)));
        }
        Ok(())
    }

    /// Scalar loss for one squared error and weight `phi`.
    pub fn value(&self, sq_err: f64, phi: f64) -> f64 {
        match (self.kind, self.adaptive) {
            (LossKind::Cauchy, true) => adaptive_cauchy_loss(sq_err, phi, self.c),
            (LossKind::Cauchy, false) => cauchy_loss(sq_err, self.c),
            (LossKind::Gaussian, true) => gaussian_weighted_loss(sq_err, phi),
            (LossKind::Gaussian, false) => sq_err,
        }
    }
}

/// `log(sq_err + c)`
pub fn cauchy_loss(sq_err: f64, c: f64) -> f64 {
    (sq_err + c).ln()
}

/// `log(e^{−φ} sq_err + c) + φ/2`
pub fn adaptive_cauchy_loss(sq_err: f64, phi: f64, c: f64) -> f64 {
    ((-phi).exp() * sq_err + c).ln() + 0.5 * phi
}

/// `½(e^{−φ} sq_err + φ)`
pub fn gaussian_weighted_loss(sq_err: f64, phi: f64) -> f64 {
    0.5 * ((-phi).exp() * sq_err + phi)
}

/// Per-row loss on graph nodes. `sq` and `phi` are `[n]`.
fn loss_graph(g: &mut Graph, cfg: &LossConfig, sq: Var, phi: Option<Var>) -> Var {
    match (cfg.kind, phi) {
        (LossKind::Cauchy, Some(phi)) => {
            let w = g.scale(phi, -1.0);
            let w = g.exp(w);
            let a = g.mul(w, sq);
            let a = g.add_scalar(a, cfg.c);
            let l = g.ln(a);
            let h = g.scale(phi, 0.5);
            g.add(l, h)
        }
        (LossKind::Cauchy, None) => {
            let a = g.add_scalar(sq, cfg.c);
            g.ln(a)
        }
        (LossKind::Gaussian, Some(phi)) => {
            let w = g.scale(phi, -1.0);
            let w = g.exp(w);
            let a = g.mul(w, sq);
            let a = g.add(a, phi);
            g.scale(a, 0.5)
        }
        (LossKind::Gaussian, None) => sq,
    }
}

// ---- loss weighting network -----------------------------------------------

fn default_phi_fourier() -> usize {
    8
}
fn default_phi_hidden() -> usize {
    64
}

/// Shape of the weighting network `φ(t, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default = "default_phi_fourier")]
    pub fourier_dim: usize,
    #[serde(default = "default_phi_hidden")]
    pub hidden: usize,
}

impl Default for PhiConfig {
    fn default() -> Self {
        Self { fourier_dim: default_phi_fourier(), hidden: default_phi_hidden() }
    }
}

impl PhiConfig {
    /// Parameters of `φ`. The output layer starts at zero, so `φ ≡ 0`.
    pub fn init(&self, rng: &mut RngStream) -> Result<Params, ObjectiveError> {
        if self.fourier_dim < 2 || self.hidden == 0 {
            return Err(ObjectiveError::InvalidConfig("phi needs fourier_dim >= 2 and hidden >= 1".into()));
        }
        let fan = 4 * self.fourier_dim;
        let s = 1.0 / (fan as f64).sqrt();
        let mut w1 = Tensor::zeros(vec![fan, self.hidden]);
        w1.data_mut().iter_mut().for_each(|v| *v = s * rng.normal());
        Ok(Params::new(vec![
            ParamEntry { name: "phi.fc1.w".into(), tensor: w1 },
            ParamEntry { name: "phi.fc1.b".into(), tensor: Tensor::zeros(vec![self.hidden]) },
            ParamEntry { name: "phi.fc2.w".into(), tensor: Tensor::zeros(vec![self.hidden, 1]) },
            ParamEntry { name: "phi.fc2.b".into(), tensor: Tensor::zeros(vec![1]) },
        ]))
    }

    /// `φ(t, r)` as an `[n]` node; `t` and `r` are `[n, 1]` columns.
    pub fn graph(&self, g: &mut Graph, p: &BoundParams, t: Var, r: Var) -> Var {
        let ft = net::fourier_features(g, t, self.fourier_dim);
        let fr = net::fourier_features(g, r, self.fourier_dim);
        let f = g.concat_last(&[ft, fr]);
        let h = g.linear(f, p.var("phi.fc1.w"), p.var("phi.fc1.b"));
        let h = g.silu(h);
        let o = g.linear(h, p.var("phi.fc2.w"), p.var("phi.fc2.b"));
        let n = g.value(o).rows();
        g.reshape(o, &[n])
    }

    pub fn eval(&self, params: &Params, t: &[f64], r: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let tv = g.constant(time_column(t));
        let rv = g.constant(time_column(r));
        let o = self.graph(&mut g, &p, tv, rv);
        g.value(o).data().to_vec()
    }
}

// ---- targets ----------------------------------------------------------------

/// Guided velocity target, detached.
///
/// Rows with a real label and `t` inside the guidance interval receive
/// `v + ω (u(x,t,t,y) − u(x,t,t,∅))`; all other rows keep `v`. Both network
/// evaluations run in one batched pass.
pub fn guided_velocity_target(
    params: &Params,
    cfg: &NetConfig,
    x_t: &Tensor,
    t: &[f64],
    v: &Tensor,
    y: &[Label],
    guidance: &GuidanceConfig,
) -> Result<Tensor, ObjectiveError> {
    let rows: Vec<usize> =
        (0..t.len()).filter(|&i| guidance.omega != 0.0 && y[i].is_some() && guidance.in_interval(t[i])).collect();
    let mut out = v.clone();
    if rows.is_empty() {
        return Ok(out);
    }
    let m = rows.len();
    let xs = x_t.select_rows(&rows);
    let x2 = Tensor::concat_rows(&[&xs, &xs]);
    let tt: Vec<f64> = rows.iter().chain(&rows).map(|&i| t[i]).collect();
    let yy: Vec<Label> = rows.iter().map(|&i| y[i]).chain(std::iter::repeat_n(None, m)).collect();
    let u = forward(params, cfg, &x2, &tt, &tt, &yy)?;
    let d = v.cols();
    for (k, &i) in rows.iter().enumerate() {
        let (uc, uu) = (u.row(k), u.row(m + k));
        let row = out.row_mut(i);
        for j in 0..d {
            row[j] += guidance.omega * (uc[j] - uu[j]);
        }
    }
    Ok(out)
}

/// Mean-flow target `v + (r − t) du/dt` for an arbitrary model.
///
/// `model(g, x, t, r)` builds `u` from `[n, d]`, `[n, 1]`, `[n, 1]` nodes.
/// Returns the primal model output and the detached target.
pub fn mf_target_with<F>(
    model: F,
    x_t: &Tensor,
    t: &[f64],
    r: &[f64],
    v_tgt: &Tensor,
) -> Result<(Tensor, Tensor), ObjectiveError>
where
    F: FnOnce(&mut Graph, Var, Var, Var) -> Result<Var, ObjectiveError>,
{
    let mut g = Graph::new();
    let (u, target) = mf_target_on_graph(&mut g, model, x_t, t, r, v_tgt)?;
    Ok((g.value(u).clone(), target))
}

fn mf_target_on_graph<F>(
    g: &mut Graph,
    model: F,
    x_t: &Tensor,
    t: &[f64],
    r: &[f64],
    v_tgt: &Tensor,
) -> Result<(Var, Tensor), ObjectiveError>
where
    F: FnOnce(&mut Graph, Var, Var, Var) -> Result<Var, ObjectiveError>,
{
    if x_t.shape() != v_tgt.shape() || t.len() != x_t.rows() || r.len() != t.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "mf_target",
            lhs: x_t.shape().to_vec(),
            rhs: v_tgt.shape().to_vec(),
        }
        .into());
    }
    let xv = g.dual(x_t.clone(), v_tgt.clone());
    let tv = g.dual(time_column(t), Tensor::full(vec![t.len(), 1], 1.0));
    let rv = g.constant(time_column(r));
    let u = model(g, xv, tv, rv)?;
    let dudt = g.tangent_or_zeros(u);
    let mut target = v_tgt.clone();
    let d = target.cols();
    for i in 0..t.len() {
        let gap = r[i] - t[i];
        let row = target.row_mut(i);
        for j in 0..d {
            row[j] += gap * dudt.row(i)[j];
        }
    }
    Ok((u, target))
}

/// Detached mean-flow target for the network `params`.
#[allow(clippy::too_many_arguments)]
pub fn mf_target(
    params: &Params,
    cfg: &NetConfig,
    x_t: &Tensor,
    t: &[f64],
    r: &[f64],
    v_tgt: &Tensor,
    y: &[Label],
) -> Result<Tensor, ObjectiveError> {
    let model = |g: &mut Graph, x, tv, rv| {
        let p = params.bind(g, false);
        Ok(forward_graph(g, &p, cfg, x, tv, rv, y, None)?)
    };
    Ok(mf_target_with(model, x_t, t, r, v_tgt)?.1)
}

/// Mean over the last axis of `(u − target)²`, one value per row.
pub fn per_sample_sq_err(u: &Tensor, target: &Tensor) -> Vec<f64> {
    assert_eq!(u.shape(), target.shape(), "per_sample_sq_err shape mismatch");
    let d = u.cols();
    (0..u.rows())
        .map(|i| u.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64)
        .collect()
}

// ---- total loss ---------------------------------------------------------------

/// Training data for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor,
    pub y: Vec<Label>,
}

/// Everything that defines the training objective apart from the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub proposal: TimeProposal,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub phi: PhiConfig,
    /// Include the mean-flow term.
    #[serde(default = "default_true")]
    pub mf_term: bool,
    /// Share noise and the larger time between the two terms.
    #[serde(default)]
    pub reuse_noise: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            proposal: TimeProposal::default(),
            loss: LossConfig::default(),
            phi: PhiConfig::default(),
            mf_term: true,
            reuse_noise: false,
        }
    }
}

/// Loss value, gradients and per-term statistics for one batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub loss_fm: f64,
    pub loss_mf: f64,
    pub grads: Vec<Tensor>,
    pub phi_grads: Vec<Tensor>,
    pub phi_mean: f64,
}

/// Draws shared by both terms for one batch.
#[derive(Clone, Debug)]
pub struct Draws {
    pub y: Vec<Label>,
    pub t_fm: Vec<f64>,
    pub eps_fm: Tensor,
    pub t_mf: Vec<f64>,
    pub r_mf: Vec<f64>,
    pub eps_mf: Tensor,
}

impl Objective {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.guidance.validate()?;
        self.loss.validate()
    }

    /// Label dropout, times and noise for `batch`, in a fixed draw order.
    pub fn draw(&self, batch: &Batch, rng: &mut RngStream) -> Draws {
        let n = batch.x0.rows();
        let d = batch.x0.cols();
        let q = self.guidance.class_dropout;
        let y = batch
            .y
            .iter()
            .map(|&l| {
                let u = rng.uniform();
                if u < q {
                    None
                } else {
                    l
                }
            })
            .collect();
        let t_fm: Vec<f64> = (0..n).map(|_| sample_time_fm(rng, self.proposal.mu_fm)).collect();
        let eps_fm = rng.normal_tensor(&[n, d]);
        let (mut t_mf, mut r_mf) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let p = sample_time_pair(rng, self.proposal.mu_mf.0, self.proposal.mu_mf.1);
            t_mf.push(p.t);
            r_mf.push(p.r);
        }
        let mut eps_mf = rng.normal_tensor(&[n, d]);
        if self.reuse_noise {
            eps_mf = eps_fm.clone();
            for i in 0..n {
                let (a, b) = (t_fm[i], r_mf[i]);
                t_mf[i] = a.max(b);
                r_mf[i] = a.min(b);
            }
        }
        Draws { y, t_fm, eps_fm, t_mf, r_mf, eps_mf }
    }

    /// `L_FM + L_MF` with gradients for the network and for `φ`.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        params: &Params,
        cfg: &NetConfig,
        phi: &Params,
        batch: &Batch,
        sched: &dyn InterpolantSchedule,
        rng: &mut RngStream,
    ) -> Result<LossOutput, ObjectiveError> {
        let draws = self.draw(batch, rng);
        self.loss_from_draws(params, cfg, phi, batch, &draws, sched)
    }

    pub fn loss_from_draws(
        &self,
        params: &Params,
        cfg: &NetConfig,
        phi: &Params,
        batch: &Batch,
        draws: &Draws,
        sched: &dyn InterpolantSchedule,
    ) -> Result<LossOutput, ObjectiveError> {
        let n = batch.x0.rows();
        let y = &draws.y;
        let (xt_fm, v_fm) = interpolate_rows(&batch.x0, &draws.eps_fm, &draws.t_fm, sched)
            .map_err(|e| ObjectiveError::InvalidConfig(e.to_string()))?;
        let tgt_fm = guided_velocity_target(params, cfg, &xt_fm, &draws.t_fm, &v_fm, y, &self.guidance)?;

        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let pp = phi.bind(&mut g, true);
        let w_mean = 1.0 / n as f64;

        let x = g.constant(xt_fm);
        let t = g.constant(time_column(&draws.t_fm));
        let u = forward_graph(&mut g, &p, cfg, x, t, t, y, None)?;
        let sq_fm = sq_err_graph(&mut g, u, &tgt_fm);
        let phi_fm = self.loss.adaptive.then(|| self.phi.graph(&mut g, &pp, t, t));
        let l_fm = loss_graph(&mut g, &self.loss, sq_fm, phi_fm);
        let fm = g.weighted_sum(l_fm, vec![w_mean; n]);
        let mut total = fm;
        let mut rows_losses = g.value(l_fm).data().to_vec();
        let mut phi_vals: Vec<f64> = phi_fm.map(|v| g.value(v).data().to_vec()).unwrap_or_default();

        let mut mf_value = 0.0;
        if self.mf_term {
            let (xt_mf, v_mf) = interpolate_rows(&batch.x0, &draws.eps_mf, &draws.t_mf, sched)
                .map_err(|e| ObjectiveError::InvalidConfig(e.to_string()))?;
            let v_tgt = guided_velocity_target(params, cfg, &xt_mf, &draws.t_mf, &v_mf, y, &self.guidance)?;
            let model = |g: &mut Graph, x, tv, rv| Ok(forward_graph(g, &p, cfg, x, tv, rv, y, None)?);
            let (u_mf, target) = mf_target_on_graph(&mut g, model, &xt_mf, &draws.t_mf, &draws.r_mf, &v_tgt)?;
            let sq_mf = sq_err_graph(&mut g, u_mf, &target);
            let phi_mf = if self.loss.adaptive {
                let tv = g.constant(time_column(&draws.t_mf));
                let rv = g.constant(time_column(&draws.r_mf));
                Some(self.phi.graph(&mut g, &pp, tv, rv))
            } else {
                None
            };
            let l_mf = loss_graph(&mut g, &self.loss, sq_mf, phi_mf);
            let mf = g.weighted_sum(l_mf, vec![w_mean; n]);
            mf_value = g.value(mf).item();
            rows_losses.extend_from_slice(g.value(l_mf).data());
            if let Some(v) = phi_mf {
                phi_vals.extend_from_slice(g.value(v).data());
            }
            total = g.add(total, mf);
        }

        let loss = g.value(total).item();
        let fm_value = g.value(fm).item();
        if !loss.is_finite() {
            return Err(ObjectiveError::NonFiniteLoss {
                value: loss,
                report: nonfinite_report(draws, &rows_losses, self.mf_term),
            });
        }
        let grads = g.backward(total)?;
        let collect = |vars: &[Var], params: &Params| -> Vec<Tensor> {
            vars.iter().zip(params.tensors()).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect()
        };
        let phi_mean = if phi_vals.is_empty() { 0.0 } else { phi_vals.iter().sum::<f64>() / phi_vals.len() as f64 };
        Ok(LossOutput {
            loss,
            loss_fm: fm_value,
            loss_mf: mf_value,
            grads: collect(p.vars(), params),
            phi_grads: collect(pp.vars(), phi),
            phi_mean,
        })
    }
}

fn sq_err_graph(g: &mut Graph, u: Var, target: &Tensor) -> Var {
    let tv = g.constant(target.clone());
    let diff = g.sub(u, tv);
    let sq = g.square(diff);
    g.mean_last(sq)
}

fn percentiles(v: &[f64]) -> String {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
    format!("p1={:.4} p50={:.4} p99={:.4}", at(0.01), at(0.5), at(0.99))
}

fn nonfinite_report(d: &Draws, row_losses: &[f64], mf: bool) -> String {
    let n = d.t_fm.len();
    let bad_fm: Vec<f64> = (0..n).filter(|&i| !row_losses[i].is_finite()).map(|i| d.t_fm[i]).collect();
    let mut out = format!("t_fm {}; non-finite FM rows at t={bad_fm:?}", percentiles(&d.t_fm));
    if mf {
        let bad_mf: Vec<(f64, f64)> =
            (0..n).filter(|&i| !row_losses[n + i].is_finite()).map(|i| (d.t_mf[i], d.r_mf[i])).collect();
        out.push_str(&format!(
            "; t_mf {}; r_mf {}; non-finite MF rows at (t,r)={bad_mf:?}",
            percentiles(&d.t_mf),
            percentiles(&d.r_mf)
        ));
    }
    out
}
