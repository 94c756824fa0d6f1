//! Command-line pipeline: warm-up training, conversion and fine-tuning,
//! sampling, evaluation, oracle checks and proposal-density export.
//!
//! Every subcommand reads an optional JSON [`RunConfig`], applies flag
//! overrides, and writes the merged config with its digest next to its
//! outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dmf_core::bench::{
    config_digest, emit_report, energy_distance, mode_coverage, sample_dataset, sliced_w2, write_points_csv,
    DatasetSpec, MetricReport,
};
use dmf_core::net::{two_thirds_split, Arch, NetConfig};
use dmf_core::numerics::rng_fork;
use dmf_core::objective::{GuidanceConfig, LossConfig, PhiConfig};
use dmf_core::process::{write_density_csv, TimeProposal};
use dmf_core::sampler::{generate, Generated, LabelPolicy, NetModel, SamplerConfig, SamplerKind};
use dmf_core::trainer::{
    load_checkpoint, run_stage, save_checkpoint, write_atomic, Stage, StageInit, StepLog, TrainConfig, TrainState,
};
use dmf_core::Tensor;

pub mod checks;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Schema(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Schema(_) => EXIT_SCHEMA,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Schema(m) => write!(f, "config error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---- configuration ----------------------------------------------------------

fn d_width() -> usize {
    128
}
fn d_depth() -> usize {
    6
}
fn d_tokens() -> usize {
    4
}
fn d_mlp_ratio() -> usize {
    2
}
fn d_fourier() -> usize {
    16
}

/// Network shape; input dimension and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    /// Encoder depth for conversion; two thirds of `depth` when absent.
    #[serde(default)]
    pub split: Option<usize>,
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default = "d_tokens")]
    pub tokens: usize,
    /// Defaults to `width`.
    #[serde(default)]
    pub time_embed_dim: Option<usize>,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_fourier")]
    pub fourier_dim: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            width: d_width(),
            depth: d_depth(),
            split: None,
            attention: false,
            qk_norm: false,
            tokens: d_tokens(),
            time_embed_dim: None,
            mlp_ratio: d_mlp_ratio(),
            fourier_dim: d_fourier(),
        }
    }
}

impl NetSection {
    pub fn net_config(&self, dataset: &DatasetSpec, arch: Arch) -> NetConfig {
        let mut c = NetConfig::new(dataset.dim(), self.width, self.depth, arch, dataset.num_classes());
        c.attention = self.attention;
        c.qk_norm = self.qk_norm;
        c.tokens = self.tokens;
        c.time_embed_dim = self.time_embed_dim.unwrap_or(self.width);
        c.mlp_ratio = self.mlp_ratio;
        c.fourier_dim = self.fourier_dim;
        if arch == Arch::DecoupledMap {
            c.split = self.split.unwrap_or_else(|| two_thirds_split(self.depth));
        }
        c
    }
}

/// Optimizer and objective settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub steps: u64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub betas: Option<(f64, f64)>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub proposal: Option<TimeProposal>,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub phi: Option<PhiConfig>,
    #[serde(default)]
    pub reuse_noise: bool,
    #[serde(default)]
    pub init_from_ema: Option<bool>,
    #[serde(default)]
    pub log_every: Option<u64>,
}

impl StageSection {
    fn with_steps(steps: u64) -> Self {
        Self {
            steps,
            batch_size: None,
            lr: None,
            betas: None,
            weight_decay: None,
            ema_decay: None,
            proposal: None,
            loss: None,
            phi: None,
            reuse_noise: false,
            init_from_ema: None,
            log_every: None,
        }
    }

    pub fn train_config(&self, stage: Stage, guidance: GuidanceConfig, seed: u64, split: Option<usize>) -> TrainConfig {
        let mut c = TrainConfig::new(stage, self.steps);
        c.guidance = guidance;
        c.seed = seed;
        c.split = split;
        c.reuse_noise = self.reuse_noise;
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr = self.lr.unwrap_or(c.lr);
        c.betas = self.betas.unwrap_or(c.betas);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.ema_decay = self.ema_decay.unwrap_or(c.ema_decay);
        c.proposal = self.proposal.unwrap_or(c.proposal);
        c.loss = self.loss.unwrap_or(c.loss);
        c.phi = self.phi.unwrap_or(c.phi);
        c.init_from_ema = self.init_from_ema.unwrap_or(c.init_from_ema);
        c.log_every = self.log_every.unwrap_or(c.log_every);
        c
    }
}

fn d_warmup() -> StageSection {
    StageSection::with_steps(20_000)
}
fn d_finetune() -> StageSection {
    StageSection::with_steps(10_000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_warmup")]
    pub warmup: StageSection,
    #[serde(default = "d_finetune")]
    pub finetune: StageSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { warmup: d_warmup(), finetune: d_finetune() }
    }
}

fn d_samples() -> usize {
    10_000
}
fn d_proj() -> usize {
    128
}
fn d_mult() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Generated samples, and fresh dataset draws to compare against.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_proj")]
    pub projections: usize,
    /// Coverage radius in units of the mode scale.
    #[serde(default = "d_mult")]
    pub coverage_multiplier: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: d_samples(), projections: d_proj(), coverage_multiplier: d_mult() }
    }
}

fn d_sampler() -> SamplerConfig {
    SamplerConfig::new(SamplerKind::MapEuler, 1)
}
fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Model guidance for the fine-tune stage. Warm-up trains plain flow
    /// matching with the same class dropout.
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default = "d_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            guidance: GuidanceConfig::default(),
            sampler: d_sampler(),
            eval: EvalSection::default(),
            seed: 0,
            output_dir: d_output(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |e: String| CliError::Schema(e);
        self.dataset.validate().map_err(|e| schema(e.to_string()))?;
        self.net_config(Arch::Flow).validate().map_err(|e| schema(e.to_string()))?;
        self.guidance.validate().map_err(|e| schema(e.to_string()))?;
        self.sampler.validate().map_err(|e| schema(e.to_string()))?;
        for (stage, sec) in [(Stage::FlowWarmup, &self.train.warmup), (Stage::MapFinetune, &self.train.finetune)] {
            sec.train_config(stage, self.guidance, self.seed, None).validate().map_err(|e| schema(e.to_string()))?;
        }
        if self.eval.samples == 0 || self.eval.projections == 0 || !(self.eval.coverage_multiplier > 0.0) {
            return Err(schema("eval needs positive samples, projections and coverage_multiplier".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, arch: Arch) -> NetConfig {
        self.net.net_config(&self.dataset, arch)
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Warm-up stage: flow matching only, no model guidance.
    pub fn warmup_config(&self) -> TrainConfig {
        let g = GuidanceConfig { omega: 0.0, ..self.guidance };
        self.train.warmup.train_config(Stage::FlowWarmup, g, self.seed, None)
    }

    pub fn finetune_config(&self, decoder_only: bool) -> TrainConfig {
        let stage = if decoder_only { Stage::DecoderOnlyFinetune } else { Stage::MapFinetune };
        self.train.finetune.train_config(stage, self.guidance, self.seed, self.net.split)
    }

    pub fn label_policy(&self) -> LabelPolicy {
        if self.dataset.num_classes() > 0 {
            LabelPolicy::Uniform
        } else {
            LabelPolicy::Unconditional
        }
    }
}

// ---- pipeline steps ---------------------------------------------------------

/// Trains the warm-up flow model.
pub fn train_flow(cfg: &RunConfig, log: &mut dyn FnMut(&StepLog)) -> Result<TrainState, CliError> {
    let tc = cfg.warmup_config();
    let (state, _) = run_stage(&tc, &cfg.dataset, StageInit::Fresh(cfg.net_config(Arch::Flow)), log).map_err(rt)?;
    Ok(state)
}

/// Converts (if needed) and fine-tunes a flow-map model from `init`.
pub fn finetune(
    cfg: &RunConfig,
    init: TrainState,
    decoder_only: bool,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainState, CliError> {
    let tc = cfg.finetune_config(decoder_only);
    let (state, _) = run_stage(&tc, &cfg.dataset, StageInit::From(Box::new(init)), log).map_err(rt)?;
    Ok(state)
}

/// Samples from the EMA weights of a checkpoint.
pub fn sample_state(
    cfg: &RunConfig,
    state: &TrainState,
    sampler: &SamplerConfig,
    n: usize,
) -> Result<Generated, CliError> {
    let model = NetModel { params: &state.ema.shadow, cfg: &state.net };
    generate(&model, n, state.net.input_dim, cfg.label_policy(), state.net.num_classes, sampler, cfg.seed, false)
        .map_err(rt)
}

/// Metrics of `samples` against fresh dataset draws.
pub fn evaluate(
    cfg: &RunConfig,
    name: &str,
    samples: &Tensor,
    nfe: usize,
    wall_time: f64,
) -> Result<MetricReport, CliError> {
    let (fresh, _) =
        sample_dataset(&cfg.dataset, cfg.eval.samples, &mut rng_fork(cfg.seed, "eval/data")).map_err(rt)?;
    let sw2 =
        sliced_w2(samples, &fresh, cfg.eval.projections, &mut rng_fork(cfg.seed, "eval/projections")).map_err(rt)?;
    let ed = energy_distance(samples, &fresh).map_err(rt)?;
    let coverage = match cfg.dataset.gmm() {
        Some(g) => Some(mode_coverage(samples, &g, cfg.eval.coverage_multiplier).map_err(rt)?),
        None => None,
    };
    Ok(MetricReport {
        name: name.to_owned(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        sliced_w2: sw2,
        energy_distance: ed,
        coverage,
        nfe,
        samples: samples.rows(),
        wall_time,
    })
}

// ---- argument parsing -------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "dmf", version, about = "Decoupled flow-map training and sampling on toy data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SamplerFlags {
    /// Checkpoint to sample from (EMA weights).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<SamplerKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Guidance interval as `low,high`.
    #[arg(long, value_parser = parse_interval)]
    interval: Option<(f64, f64)>,
    /// Number of samples (defaults to `eval.samples`).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the flow model (flow matching warm-up).
    TrainFlow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Convert a flow checkpoint and fine-tune it as a flow map.
    FinetuneDmf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        init: PathBuf,
        /// Encoder depth of the conversion (default: `net.split`, else 20).
        #[arg(long)]
        depth: Option<usize>,
        /// Freeze the encoder.
        #[arg(long)]
        decoder_only: bool,
    },
    /// Generate samples to CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Output CSV (default `<output_dir>/samples.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample and score against fresh dataset draws.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Report name (default: sampler kind and steps).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run the analytic invariant suite.
    OracleCheck,
    /// Write the pair-proposal marginal densities as CSV.
    ProposalDump {
        #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
        mu1: f64,
        #[arg(long, default_value_t = -1.2, allow_negative_numbers = true)]
        mu2: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<SamplerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown sampler `{s}` (flow-euler, flow-heun, flow-sde, map-euler, restart, ctm-gamma)"))
}

fn parse_interval(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `low,high`")?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

// ---- commands ---------------------------------------------------------------

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(o) = &common.output_dir {
        c.output_dir = o.clone();
    }
    Ok(c)
}

fn apply_train(sec: &mut StageSection, f: &TrainFlags) {
    if let Some(s) = f.steps {
        sec.steps = s;
    }
    if f.batch_size.is_some() {
        sec.batch_size = f.batch_size;
    }
    if f.lr.is_some() {
        sec.lr = f.lr;
    }
}

fn apply_sampler(c: &mut RunConfig, f: &SamplerFlags) {
    let s = &mut c.sampler;
    if let Some(k) = f.kind {
        s.kind = k;
    }
    if let Some(v) = f.steps {
        s.steps = v;
    }
    if let Some(v) = f.gamma {
        s.gamma = v;
    }
    if let Some(v) = f.shift {
        s.shift = v;
    }
    if let Some(v) = f.cfg_scale {
        s.cfg_scale = v;
    }
    if let Some(v) = f.interval {
        s.interval = v;
    }
    if let Some(n) = f.n {
        c.eval.samples = n;
    }
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'a str,
    config_digest: String,
    config: &'a RunConfig,
}

fn prepare_dir(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(rt)?;
    let eff = Effective { command, config_digest: cfg.digest(), config: cfg };
    let mut text = serde_json::to_string_pretty(&eff).map_err(rt)?;
    text.push('\n');
    write_atomic(&cfg.output_dir.join(format!("{command}.config.json")), text.as_bytes()).map_err(rt)
}

fn run_training(
    cfg: &RunConfig,
    command: &str,
    ckpt_name: &str,
    log_name: &str,
    body: impl FnOnce(&RunConfig, &mut dyn FnMut(&StepLog)) -> Result<TrainState, CliError>,
) -> Result<(), CliError> {
    prepare_dir(cfg, command)?;
    let mut lines = Vec::new();
    let start = Instant::now();
    let state = body(cfg, &mut |l: &StepLog| {
        lines.extend(serde_json::to_vec(l).expect("step log serializes"));
        lines.push(b'\n');
    })?;
    write_atomic(&cfg.output_dir.join(log_name), &lines).map_err(rt)?;
    let path = cfg.output_dir.join(ckpt_name);
    save_checkpoint(&path, &state).map_err(rt)?;
    println!(
        "{}: {} steps ({} rejected) in {:.1}s -> {}",
        command,
        state.step,
        state.rejected,
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, ckpt: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let state = load_checkpoint(ckpt).map_err(rt)?;
    prepare_dir(cfg, "sample")?;
    let g = sample_state(cfg, &state, &cfg.sampler, cfg.eval.samples)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("samples.csv"));
    write_points_csv(&out, &g.samples, &g.labels).map_err(rt)?;
    println!("sample: {} points, NFE={} -> {}", g.samples.rows(), g.nfe, out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, name: Option<String>) -> Result<(), CliError> {
    let state = load_checkpoint(ckpt).map_err(rt)?;
    prepare_dir(cfg, "eval")?;
    let start = Instant::now();
    let g = sample_state(cfg, &state, &cfg.sampler, cfg.eval.samples)?;
    let wall = start.elapsed().as_secs_f64();
    let kind = serde_json::to_value(cfg.sampler.kind).map_err(rt)?;
    let name = name.unwrap_or_else(|| format!("{}-{}", kind.as_str().unwrap_or("sampler"), cfg.sampler.steps));
    let report = evaluate(cfg, &name, &g.samples, g.nfe, wall)?;
    let path = cfg.output_dir.join(format!("report.{name}.jsonl"));
    if path.exists() {
        fs::remove_file(&path).map_err(rt)?;
    }
    emit_report(&path, &report).map_err(rt)?;
    println!("{}", serde_json::to_string(&report).map_err(rt)?);
    Ok(())
}

fn cmd_proposal(mu1: f64, mu2: f64, points: usize, out: &Path) -> Result<(), CliError> {
    if points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let mut buf = Vec::new();
    write_density_csv(&mut buf, mu1, mu2, points).map_err(rt)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(rt)?;
    }
    write_atomic(out, &buf).map_err(rt)?;
    println!("proposal-dump: {points} rows -> {}", out.display());
    Ok(())
}

/// Default encoder depth of `finetune-dmf` when neither the flag nor the
/// config gives one.
pub const DEFAULT_DMF_DEPTH: usize = 20;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::TrainFlow { common, train } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg.train.warmup, &train);
            cfg.validate()?;
            run_training(&cfg, "train-flow", "flow.ckpt", "train-flow.log.jsonl", |c, log| train_flow(c, log))
        }
        Command::FinetuneDmf { common, train, init, depth, decoder_only } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg.train.finetune, &train);
            if let Some(d) = depth {
                cfg.net.split = Some(d);
            }
            if cfg.net.split.is_none() {
                cfg.net.split = Some(DEFAULT_DMF_DEPTH);
            }
            cfg.validate()?;
            let init_state = load_checkpoint(&init).map_err(rt)?;
            let split = cfg.net.split.unwrap_or(DEFAULT_DMF_DEPTH);
            if init_state.net.arch == Arch::Flow && !(split > 0 && split < init_state.net.depth) {
                return Err(CliError::Usage(format!(
                    "--depth must satisfy 0 < d < {} for this checkpoint, got {split}",
                    init_state.net.depth
                )));
            }
            let (file, log) = if decoder_only {
                ("dmf-decoder.ckpt", "finetune-dmf-decoder.log.jsonl")
            } else {
                ("dmf.ckpt", "finetune-dmf.log.jsonl")
            };
            run_training(&cfg, "finetune-dmf", file, log, |c, log| finetune(c, init_state, decoder_only, log))
        }
        Command::Sample { common, sampler, out } => {
            let mut cfg = base_config(&common)?;
            apply_sampler(&mut cfg, &sampler);
            cfg.validate()?;
            cmd_sample(&cfg, &sampler.ckpt, out)
        }
        Command::Eval { common, sampler, name } => {
            let mut cfg = base_config(&common)?;
            apply_sampler(&mut cfg, &sampler);
            cfg.validate()?;
            cmd_eval(&cfg, &sampler.ckpt, name)
        }
        Command::OracleCheck => {
            let results = checks::run_all();
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.pass);
            }
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} oracle check(s) failed")));
            }
            Ok(())
        }
        Command::ProposalDump { mu1, mu2, points, out } => cmd_proposal(mu1, mu2, points, &out),
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
