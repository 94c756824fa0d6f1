//! Staged training: flow warm-up, flow-to-map conversion and map fine-tuning,
//! with AdamW, an EMA shadow and a checksummed checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "DMFCKPT\0" | version u32 | header length u64 | JSON header
//! | f64 blob (tensors in header order) | SHA-256 of everything before it
//! ```

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{sample_dataset, BenchError, DatasetSpec};
use crate::net::{
    convert_flow_to_map, freeze_mask, two_thirds_split, Arch, FreezeMode, NetConfig, NetError, ParamEntry, Params,
};
use crate::numerics::{rng_fork, RngState, RngStream, Tensor};
use crate::objective::{Batch, GuidanceConfig, LossConfig, Objective, ObjectiveError, PhiConfig};
use crate::process::{RectifiedFlow, TimeProposal};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("stage {stage:?} cannot train a {arch:?} network")]
    StageArch { stage: Stage, arch: Arch },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FlowWarmup,
    MapFinetune,
    DecoderOnlyFinetune,
}

fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    1e-4
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn d_eps() -> f64 {
    1e-8
}
fn d_ema() -> f64 {
    0.999
}
fn d_log_every() -> u64 {
    100
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub proposal: TimeProposal,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub reuse_noise: bool,
    /// Encoder depth used when a flow checkpoint is converted.
    #[serde(default)]
    pub split: Option<usize>,
    /// Start a new stage from the EMA weights of the init checkpoint.
    #[serde(default = "d_true")]
    pub init_from_ema: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: u64) -> Self {
        Self {
            stage,
            steps,
            batch_size: d_batch(),
            lr: d_lr(),
            betas: d_betas(),
            eps: d_eps(),
            weight_decay: 0.0,
            ema_decay: d_ema(),
            guidance: GuidanceConfig::default(),
            proposal: TimeProposal::default(),
            loss: LossConfig::default(),
            phi: PhiConfig::default(),
            reuse_noise: false,
            split: None,
            init_from_ema: true,
            seed: 0,
            log_every: d_log_every(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and eps must be positive, weight_decay nonnegative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        self.objective().validate()?;
        Ok(())
    }

    /// The loss for this stage; the mean-flow term is off during warm-up.
    pub fn objective(&self) -> Objective {
        Objective {
            guidance: self.guidance,
            proposal: self.proposal,
            loss: self.loss,
            phi: self.phi,
            mf_term: self.stage != Stage::FlowWarmup,
            reuse_noise: self.reuse_noise,
        }
    }

    fn freeze_mode(&self) -> FreezeMode {
        match self.stage {
            Stage::DecoderOnlyFinetune => FreezeMode::DecoderOnly,
            _ => FreezeMode::All,
        }
    }
}

/// `shadow ← decay · shadow + (1 − decay) · params`
pub fn ema_update(shadow: &mut Params, params: &Params, decay: f64) -> Result<(), TrainError> {
    if !shadow.same_layout(params) {
        return Err(NetError::Layout("EMA shadow and parameters differ".into()).into());
    }
    for (i, p) in params.tensors().enumerate() {
        for (s, &v) in shadow.tensor_mut(i).data_mut().iter_mut().zip(p.data()) {
            *s = decay * *s + (1.0 - decay) * v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Params,
}

/// First and second moments for AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    /// Accepted updates so far (bias-correction exponent).
    pub steps: u64,
}

fn zeros_like(p: &Params) -> Params {
    Params::new(
        p.entries()
            .iter()
            .map(|e| ParamEntry { name: e.name.clone(), tensor: Tensor::zeros(e.tensor.shape().to_vec()) })
            .collect(),
    )
}

impl AdamState {
    pub fn new(p: &Params) -> Self {
        Self { m: zeros_like(p), v: zeros_like(p), steps: 0 }
    }

    /// One bias-corrected AdamW update of the tensors where `mask` is true.
    pub fn update(&mut self, params: &mut Params, grads: &[Tensor], mask: &[bool], cfg: &TrainConfig) {
        self.steps += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let m = self.m.tensor_mut(i).data_mut();
            let v = self.v.tensor_mut(i).data_mut();
            let p = params.tensor_mut(i).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
            }
        }
    }
}

/// Everything needed to continue or reproduce training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub ema: EmaState,
    pub phi: Params,
    pub opt: AdamState,
    pub phi_opt: AdamState,
    pub step: u64,
    pub rejected: u64,
    pub rng: RngState,
}

impl TrainState {
    pub fn fresh(net: NetConfig, train: TrainConfig) -> Result<Self, TrainError> {
        let mut init_rng = rng_fork(train.seed, "init");
        let params = Params::init(&net, &mut init_rng)?;
        let phi = train.phi.init(&mut init_rng)?;
        Ok(Self::from_weights(net, train, params, phi))
    }

    fn from_weights(net: NetConfig, train: TrainConfig, params: Params, phi: Params) -> Self {
        let rng = rng_fork(train.seed, &stage_label(train.stage)).state();
        Self {
            ema: EmaState { decay: train.ema_decay, shadow: params.clone() },
            opt: AdamState::new(&params),
            phi_opt: AdamState::new(&phi),
            net,
            params,
            phi,
            step: 0,
            rejected: 0,
            rng,
            train,
        }
    }

    pub fn mask(&self) -> Result<Vec<bool>, TrainError> {
        Ok(freeze_mask(&self.params, &self.net, self.train.freeze_mode())?)
    }
}

fn stage_label(stage: Stage) -> String {
    format!("train/{}", serde_json::to_value(stage).expect("stage").as_str().unwrap_or("stage"))
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_fm: f64,
    pub loss_mf: f64,
    pub grad_norm: f64,
    pub phi_mean: f64,
    pub rejected: bool,
}

fn is_non_finite(e: &ObjectiveError) -> bool {
    matches!(e, ObjectiveError::NonFiniteLoss { .. } | ObjectiveError::Net(NetError::NonFinite { .. }))
}

/// One loss evaluation and update. Non-finite losses or gradients leave the
/// weights untouched and count as rejected; the step counter advances either way.
pub fn train_step(state: &mut TrainState, batch: &Batch, mask: &[bool]) -> Result<StepLog, TrainError> {
    let obj = state.train.objective();
    let mut rng = RngStream::from_state(&state.rng);
    let out = obj.total_loss(&state.params, &state.net, &state.phi, batch, &RectifiedFlow, &mut rng);
    state.rng = rng.state();
    state.step += 1;
    let reject = |state: &mut TrainState| {
        state.rejected += 1;
        StepLog {
            step: state.step,
            loss_fm: f64::NAN,
            loss_mf: f64::NAN,
            grad_norm: f64::NAN,
            phi_mean: f64::NAN,
            rejected: true,
        }
    };
    let out = match out {
        Ok(o) => o,
        Err(e) if is_non_finite(&e) => return Ok(reject(state)),
        Err(e) => return Err(e.into()),
    };
    let grad_norm = out.grads.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g.norm_sq()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || out.phi_grads.iter().any(|g| !g.is_finite()) {
        return Ok(reject(state));
    }
    let cfg = state.train.clone();
    state.opt.update(&mut state.params, &out.grads, mask, &cfg);
    let phi_mask = vec![true; state.phi.len()];
    state.phi_opt.update(&mut state.phi, &out.phi_grads, &phi_mask, &cfg);
    ema_update(&mut state.ema.shadow, &state.params, state.ema.decay)?;
    Ok(StepLog {
        step: state.step,
        loss_fm: out.loss_fm,
        loss_mf: out.loss_mf,
        grad_norm,
        phi_mean: out.phi_mean,
        rejected: false,
    })
}

/// Initial weights for a stage.
pub enum StageInit {
    Fresh(NetConfig),
    From(Box<TrainState>),
}

/// Wall-clock summary of a finished stage (not part of the checkpoint).
#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub steps: u64,
    pub rejected: u64,
    pub wall_time: f64,
    pub seconds_per_step: f64,
}

fn check_stage_arch(stage: Stage, arch: Arch) -> Result<(), TrainError> {
    let ok = match stage {
        Stage::FlowWarmup => arch == Arch::Flow,
        Stage::MapFinetune => arch != Arch::Flow,
        Stage::DecoderOnlyFinetune => arch == Arch::DecoupledMap,
    };
    if ok {
        Ok(())
    } else {
        Err(TrainError::StageArch { stage, arch })
    }
}

/// Builds the starting state of a stage. A flow checkpoint entering a map
/// stage is converted with `split` (two thirds of the depth by default).
pub fn prepare_stage(cfg: &TrainConfig, init: StageInit) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let state = match init {
        StageInit::Fresh(net) => {
            check_stage_arch(cfg.stage, net.arch)?;
            TrainState::fresh(net, cfg.clone())?
        }
        StageInit::From(prev) => {
            let prev = *prev;
            let weights = if cfg.init_from_ema { prev.ema.shadow } else { prev.params };
            let (weights, net) = if prev.net.arch == Arch::Flow && cfg.stage != Stage::FlowWarmup {
                let split = cfg.split.unwrap_or_else(|| two_thirds_split(prev.net.depth));
                convert_flow_to_map(&weights, &prev.net, split)?
            } else {
                (weights, prev.net)
            };
            check_stage_arch(cfg.stage, net.arch)?;
            let fresh_phi = cfg.phi.init(&mut rng_fork(cfg.seed, "init"))?;
            let phi = if prev.phi.same_layout(&fresh_phi) { prev.phi } else { fresh_phi };
            TrainState::from_weights(net, cfg.clone(), weights, phi)
        }
    };
    Ok(state)
}

/// Runs `cfg.steps` steps on fresh batches from `data`.
pub fn run_stage(
    cfg: &TrainConfig,
    data: &DatasetSpec,
    init: StageInit,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(TrainState, StageSummary), TrainError> {
    let mut state = prepare_stage(cfg, init)?;
    if data.dim() != state.net.input_dim {
        return Err(TrainError::Config(format!(
            "dataset dimension {} does not match network input {}",
            data.dim(),
            state.net.input_dim
        )));
    }
    if data.num_classes() > state.net.num_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, network {}",
            data.num_classes(),
            state.net.num_classes
        )));
    }
    let mask = state.mask()?;
    let start = Instant::now();
    let first = state.step;
    while state.step < cfg.steps {
        let mut rng = RngStream::from_state(&state.rng);
        let (x0, y) = sample_dataset(data, cfg.batch_size, &mut rng)?;
        state.rng = rng.state();
        let rec = train_step(&mut state, &Batch { x0, y }, &mask)?;
        if rec.rejected || rec.step % cfg.log_every.max(1) == 0 || rec.step == cfg.steps {
            log(&rec);
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let done = state.step - first;
    let summary = StageSummary {
        steps: done,
        rejected: state.rejected,
        wall_time: wall,
        seconds_per_step: if done > 0 { wall / done as f64 } else { 0.0 },
    };
    Ok((state, summary))
}

// ---- checkpoint container ---------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    step: u64,
    rejected: u64,
    opt_steps: u64,
    phi_opt_steps: u64,
    ema_decay: f64,
    rng: RngState,
    groups: Vec<Group>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Group {
    group: String,
    tensors: Vec<(String, Vec<usize>)>,
}

fn groups(state: &TrainState) -> Vec<(&'static str, &Params)> {
    vec![
        ("params", &state.params),
        ("ema", &state.ema.shadow),
        ("phi", &state.phi),
        ("opt.m", &state.opt.m),
        ("opt.v", &state.opt.v),
        ("phi_opt.m", &state.phi_opt.m),
        ("phi_opt.v", &state.phi_opt.v),
    ]
}

/// Serialized checkpoint bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>, TrainError> {
    let gs = groups(state);
    let header = Header {
        net: state.net.clone(),
        train: state.train.clone(),
        step: state.step,
        rejected: state.rejected,
        opt_steps: state.opt.steps,
        phi_opt_steps: state.phi_opt.steps,
        ema_decay: state.ema.decay,
        rng: state.rng.clone(),
        groups: gs
            .iter()
            .map(|(g, p)| Group {
                group: (*g).to_owned(),
                tensors: p.entries().iter().map(|e| (e.name.clone(), e.tensor.shape().to_vec())).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in &gs {
        for t in p.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, TrainError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(TrainError::Corrupt("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TrainError::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| TrainError::Corrupt("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[20..hend])?;
    let mut blob = body[hend..].chunks_exact(8);
    if body[hend..].len() % 8 != 0 {
        return Err(TrainError::Corrupt("blob is not a whole number of f64".into()));
    }
    let mut read_group = |g: &Group| -> Result<Params, TrainError> {
        let mut entries = Vec::with_capacity(g.tensors.len());
        for (name, shape) in &g.tensors {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let c = blob.next().ok_or_else(|| TrainError::Corrupt("blob too short".into()))?;
                data.push(f64::from_le_bytes(c.try_into().expect("8 bytes")));
            }
            let tensor = Tensor::new(shape.clone(), data).map_err(|e| TrainError::Corrupt(e.to_string()))?;
            entries.push(ParamEntry { name: name.clone(), tensor });
        }
        Ok(Params::new(entries))
    };
    let want = ["params", "ema", "phi", "opt.m", "opt.v", "phi_opt.m", "phi_opt.v"];
    if header.groups.len() != want.len() || header.groups.iter().zip(want).any(|(g, w)| g.group != w) {
        return Err(TrainError::Corrupt("unexpected tensor groups".into()));
    }
    let mut ps = Vec::with_capacity(want.len());
    for g in &header.groups {
        ps.push(read_group(g)?);
    }
    if blob.next().is_some() {
        return Err(TrainError::Corrupt("trailing data after tensors".into()));
    }
    let mut it = ps.into_iter();
    let mut next = || it.next().expect("seven groups");
    let (params, shadow, phi, m, v, pm, pv) = (next(), next(), next(), next(), next(), next(), next());
    params.check_layout(&header.net)?;
    Ok(TrainState {
        net: header.net,
        train: header.train,
        params,
        ema: EmaState { decay: header.ema_decay, shadow },
        phi,
        opt: AdamState { m, v, steps: header.opt_steps },
        phi_opt: AdamState { m: pm, v: pv, steps: header.phi_opt_steps },
        step: header.step,
        rejected: header.rejected,
        rng: header.rng,
    })
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(state)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp.{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
