//! Analytic invariants run by `dmf oracle-check`. None of them needs a
//! trained model.

use dmf_core::net::{convert_flow_to_map, forward, Arch, NetConfig, Params};
use dmf_core::numerics::rng_fork;
use dmf_core::objective::{mf_target, per_sample_sq_err};
use dmf_core::oracle::{discretization_error, GaussianSpec, GmmSpec};
use dmf_core::process::{order_stat_densities, time_shift};
use dmf_core::sampler::{generate, Diffusion, GaussianFlow, GaussianMap, LabelPolicy, SamplerConfig, SamplerKind};
use dmf_core::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn result(name: &'static str, outcome: Result<(bool, String), String>) -> CheckResult {
    match outcome {
        Ok((pass, detail)) => CheckResult { name, pass, detail },
        Err(e) => CheckResult { name, pass: false, detail: e },
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        result("gaussian-map-err", gaussian_map_err()),
        result("gmm-single-mode", gmm_single_mode()),
        result("proposal-densities", proposal_densities()),
        result("time-shift-inverse", time_shift_inverse()),
        result("conversion-exact", conversion_exact()),
        result("mf-boundary", mf_boundary()),
        result("ctm-gamma0-map-euler", sampler_pair(ctm(0.0), SamplerConfig::new(SamplerKind::MapEuler, 4), true)),
        result("ctm-gamma1-restart", sampler_pair(ctm(1.0), SamplerConfig::new(SamplerKind::Restart, 4), true)),
        result(
            "restart-1step-map-euler",
            sampler_pair(
                SamplerConfig::new(SamplerKind::Restart, 1),
                SamplerConfig::new(SamplerKind::MapEuler, 1),
                false,
            ),
        ),
        result("flow-sde-zero-diffusion", flow_sde_zero()),
    ]
}

const SPEC_MEAN: [f64; 2] = [1.5, -0.5];

fn spec() -> GaussianSpec {
    GaussianSpec::new(SPEC_MEAN.to_vec(), 0.6)
}

fn gaussian_map_err() -> Result<(bool, String), String> {
    let s = spec();
    let u = |x: &[f64], t: f64, r: f64| s.transport_row(x, t, r).expect("transport").1;
    let v = |x: &[f64], t: f64| s.velocity_row(x, t).expect("velocity");
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let x = [0.7, -1.1];
    let mut worst: f64 = 0.0;
    let mut diag_zero = true;
    for &t in &grid {
        for &r in grid.iter().filter(|&&r| r <= t) {
            let rep = discretization_error(&u, &v, &x, t, r, 1e-10).map_err(err)?;
            if r == t {
                diag_zero &= rep.err == 0.0;
            } else {
                worst = worst.max(rep.err);
            }
        }
    }
    Ok((worst <= 1e-8 && diag_zero, format!("max Err {worst:.2e}, Err(r=t)=0: {diag_zero}")))
}

fn gmm_single_mode() -> Result<(bool, String), String> {
    let s = spec();
    let g = GmmSpec::new(vec![1.0], vec![SPEC_MEAN.to_vec()], vec![0.6]).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (x, t) in [([0.3, 0.2], 0.2), ([-2.0, 1.0], 0.5), ([4.0, 0.0], 0.9)] {
        let a = s.velocity_row(&x, t).map_err(err)?;
        let b = g.velocity_row(&x, t).map_err(err)?;
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    Ok((worst < 1e-12, format!("max diff {worst:.2e}")))
}

fn proposal_densities() -> Result<(bool, String), String> {
    let n = 200_000;
    let mut worst: f64 = 0.0;
    for (m1, m2) in [(-0.4, -0.4), (0.4, -1.2)] {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..n {
            let z = (i as f64 + 0.5) / n as f64;
            let (fmax, fmin) = order_stat_densities(z, m1, m2).map_err(err)?;
            a += fmax;
            b += fmin;
        }
        worst = worst.max((a / n as f64 - 1.0).abs()).max((b / n as f64 - 1.0).abs());
    }
    Ok((worst < 1e-6, format!("max |∫f − 1| {worst:.2e}")))
}

fn time_shift_inverse() -> Result<(bool, String), String> {
    let mut worst: f64 = 0.0;
    for s in [0.25, 1.0, 3.0] {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let back = time_shift(time_shift(t, s).map_err(err)?, 1.0 / s).map_err(err)?;
            worst = worst.max((back - t).abs());
        }
    }
    Ok((worst < 1e-12, format!("max round-trip error {worst:.2e}")))
}

fn random_flow() -> Result<(Params, NetConfig), String> {
    let mut c = NetConfig::new(2, 16, 3, Arch::Flow, 4);
    c.time_embed_dim = 8;
    let mut rng = rng_fork(11, "check/net");
    let mut p = Params::init(&c, &mut rng).map_err(err)?;
    p.perturb(&mut rng, 0.1);
    Ok((p, c))
}

fn inputs(n: usize) -> (Tensor, Vec<f64>, Vec<Option<usize>>) {
    let mut rng = rng_fork(11, "check/inputs");
    let x = rng.normal_tensor(&[n, 2]);
    let t = (0..n).map(|_| rng.uniform()).collect();
    let y = (0..n).map(|i| if i % 5 == 0 { None } else { Some(rng.below(4)) }).collect();
    (x, t, y)
}

fn conversion_exact() -> Result<(bool, String), String> {
    let (p, c) = random_flow()?;
    let (mp, mc) = convert_flow_to_map(&p, &c, 2).map_err(err)?;
    let (x, t, y) = inputs(64);
    let a = forward(&p, &c, &x, &t, &t, &y).map_err(err)?;
    let b = forward(&mp, &mc, &x, &t, &t, &y).map_err(err)?;
    let same = a.bit_eq(&b);
    Ok((same, format!("64 inputs, bitwise equal: {same}")))
}

fn mf_boundary() -> Result<(bool, String), String> {
    let (p, c) = random_flow()?;
    let (mp, mc) = convert_flow_to_map(&p, &c, 2).map_err(err)?;
    let (x, t, y) = inputs(64);
    let v = rng_fork(11, "check/v").normal_tensor(&[64, 2]);
    let u = forward(&mp, &mc, &x, &t, &t, &y).map_err(err)?;
    let tgt = mf_target(&mp, &mc, &x, &t, &t, &v, &y).map_err(err)?;
    let mf = per_sample_sq_err(&u, &tgt);
    let fm = per_sample_sq_err(&u, &v);
    let worst = mf.iter().zip(&fm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("max |MF − FM| at r=t {worst:.2e}")))
}

fn ctm(gamma: f64) -> SamplerConfig {
    let mut c = SamplerConfig::new(SamplerKind::CtmGamma, 4);
    c.gamma = gamma;
    c
}

fn sampler_pair(a: SamplerConfig, b: SamplerConfig, bitwise: bool) -> Result<(bool, String), String> {
    let model = GaussianMap(spec());
    let ga = generate(&model, 64, 2, LabelPolicy::Unconditional, 0, &a, 3, false).map_err(err)?;
    let gb = generate(&model, 64, 2, LabelPolicy::Unconditional, 0, &b, 3, false).map_err(err)?;
    if bitwise {
        let same = ga.samples.bit_eq(&gb.samples);
        Ok((same, format!("bitwise equal: {same}")))
    } else {
        let d = ga.samples.max_abs_diff(&gb.samples);
        Ok((d <= 1e-12, format!("max diff {d:.2e}")))
    }
}

fn flow_sde_zero() -> Result<(bool, String), String> {
    let model = GaussianFlow(spec());
    let mut sde = SamplerConfig::new(SamplerKind::FlowSde, 16);
    sde.diffusion = Diffusion::Zero;
    let euler = SamplerConfig::new(SamplerKind::FlowEuler, 16);
    let a = generate(&model, 64, 2, LabelPolicy::Unconditional, 0, &sde, 3, false).map_err(err)?;
    let b = generate(&model, 64, 2, LabelPolicy::Unconditional, 0, &euler, 3, false).map_err(err)?;
    let same = a.samples.bit_eq(&b.samples);
    Ok((same, format!("bitwise equal: {same}")))
}
