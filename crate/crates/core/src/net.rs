//! Conditioned residual network with adaptive-norm modulation.
//!
//! Three conditioning variants share one block layout:
//!
//! * `Flow`: every block sees `embed(t) + embed(y)`; `r` is ignored.
//! * `JointMap`: every block sees `embed(t) + embed_r(t − r) + embed(y)`,
//!   where `embed_r` is a separate embedding layer.
//! * `DecoupledMap`: blocks `0..split` (encoder) see `embed(t) + embed(y)`;
//!   the remaining blocks and the output head (decoder) see
//!   `embed(r) + embed(y)` through the *same* timestep embedding layer.
//!
//! A decoupled network has exactly the parameters of a flow network of the
//! same width and depth, so [`convert_flow_to_map`] only changes routing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, RngStream, Tensor, Var};

/// Class label; `None` is the null (unconditional) class.
pub type Label = Option<usize>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("non-finite activation after block {block}")]
    NonFinite { block: usize },
    #[error("operation requires arch {expected:?}, network is {actual:?}")]
    ArchMismatch { expected: Arch, actual: Arch },
    #[error("input shape {0:?} does not match the network")]
    BadInput(Vec<usize>),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Flow,
    JointMap,
    DecoupledMap,
}

fn default_tokens() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    2
}
fn default_fourier() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    /// Total number of residual blocks.
    pub depth: usize,
    /// Number of encoder blocks for `DecoupledMap`.
    #[serde(default)]
    pub split: usize,
    pub arch: Arch,
    /// Real classes; the embedding table holds one extra null row.
    pub num_classes: usize,
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub qk_norm: bool,
    /// Token count for the attention sublayer (`width` must divide evenly).
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    pub time_embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Number of sinusoidal frequencies in the timestep features.
    #[serde(default = "default_fourier")]
    pub fourier_dim: usize,
}

/// Encoder depth at two thirds of the network, kept inside `1..depth`.
pub fn two_thirds_split(depth: usize) -> usize {
    ((2 * depth) / 3).clamp(1, depth.saturating_sub(1).max(1))
}

impl NetConfig {
    pub fn new(input_dim: usize, width: usize, depth: usize, arch: Arch, num_classes: usize) -> Self {
        Self {
            input_dim,
            width,
            depth,
            split: if arch == Arch::DecoupledMap { two_thirds_split(depth) } else { 0 },
            arch,
            num_classes,
            attention: false,
            qk_norm: false,
            tokens: default_tokens(),
            time_embed_dim: width,
            mlp_ratio: default_mlp_ratio(),
            fourier_dim: default_fourier(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_owned()));
        if self.input_dim == 0 || self.width == 0 || self.depth == 0 || self.time_embed_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.fourier_dim < 2 || self.mlp_ratio == 0 {
            return bad("fourier_dim >= 2 and mlp_ratio >= 1 required");
        }
        if self.arch == Arch::DecoupledMap && !(self.split > 0 && self.split < self.depth) {
            return bad(&format!("split must satisfy 0 < d < {}, got {}", self.depth, self.split));
        }
        if self.attention && (self.tokens == 0 || self.width % self.tokens != 0) {
            return bad("width must be divisible by tokens");
        }
        Ok(())
    }

    fn mod_chunks(&self) -> usize {
        if self.attention {
            6
        } else {
            3
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.tokens
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<ParamEntry>", into = "Vec<ParamEntry>")]
pub struct Params {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl From<Vec<ParamEntry>> for Params {
    fn from(entries: Vec<ParamEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Self { entries, index }
    }
}

impl From<Params> for Vec<ParamEntry> {
    fn from(p: Params) -> Self {
        p.entries
    }
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

impl Params {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        entries.into()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    /// Registers every tensor in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .entries
            .iter()
            .map(|e| if trainable { g.param(e.tensor.clone()) } else { g.constant(e.tensor.clone()) })
            .collect();
        BoundParams { params: self, vars }
    }

    /// Adds `N(0, scale²)` noise to every entry. Used to move tests away
    /// from zero-initialized gates.
    pub fn perturb(&mut self, rng: &mut RngStream, scale: f64) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v += scale * rng.normal();
            }
        }
    }
}

/// Graph handles for a [`Params`] set.
pub struct BoundParams<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// Parameter names and shapes for `cfg`, with their init rule.
enum Init {
    /// `N(0, 1/fan_in)`
    Fan,
    Zero,
    /// Modulation weights: gate columns zero, others small normal.
    Modulation {
        chunks: usize,
        gates: Vec<usize>,
    },
    Normal(f64),
}

fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, w, e, f) = (cfg.input_dim, cfg.width, cfg.time_embed_dim, cfg.fourier_dim);
    let hidden = cfg.mlp_ratio * w;
    let mut out = Vec::new();
    let embed = |prefix: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
        out.push((format!("{prefix}.fc1.w"), vec![2 * f, e], Init::Fan));
        out.push((format!("{prefix}.fc1.b"), vec![e], Init::Zero));
        out.push((format!("{prefix}.fc2.w"), vec![e, e], Init::Fan));
        out.push((format!("{prefix}.fc2.b"), vec![e], Init::Zero));
    };
    embed("t_embed", &mut out);
    if cfg.arch == Arch::JointMap {
        embed("r_embed", &mut out);
    }
    out.push(("y_embed.table".into(), vec![cfg.num_classes + 1, e], Init::Normal(0.5)));
    out.push(("in_proj.w".into(), vec![d, w], Init::Fan));
    out.push(("in_proj.b".into(), vec![w], Init::Zero));
    let chunks = cfg.mod_chunks();
    let gates = if cfg.attention { vec![2, 5] } else { vec![2] };
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        out.push((format!("{p}.mod.w"), vec![e, chunks * w], Init::Modulation { chunks, gates: gates.clone() }));
        out.push((format!("{p}.mod.b"), vec![chunks * w], Init::Zero));
        if cfg.attention {
            let dh = cfg.head_dim();
            for n in ["q", "k", "v"] {
                out.push((format!("{p}.attn.{n}.w"), vec![dh, dh], Init::Fan));
            }
            out.push((format!("{p}.attn.o.w"), vec![w, w], Init::Fan));
            out.push((format!("{p}.attn.o.b"), vec![w], Init::Zero));
        }
        out.push((format!("{p}.mlp.fc1.w"), vec![w, hidden], Init::Fan));
        out.push((format!("{p}.mlp.fc1.b"), vec![hidden], Init::Zero));
        out.push((format!("{p}.mlp.fc2.w"), vec![hidden, w], Init::Fan));
        out.push((format!("{p}.mlp.fc2.b"), vec![w], Init::Zero));
    }
    out.push(("head.mod.w".into(), vec![e, 2 * w], Init::Modulation { chunks: 2, gates: vec![] }));
    out.push(("head.mod.b".into(), vec![2 * w], Init::Zero));
    out.push(("head.out.w".into(), vec![w, d], Init::Normal(0.02)));
    out.push(("head.out.b".into(), vec![d], Init::Zero));
    out
}

impl Params {
    /// Fresh parameters. Block gates start at zero so every residual branch
    /// is initially closed.
    pub fn init(cfg: &NetConfig, rng: &mut RngStream) -> Result<Self, NetError> {
        cfg.validate()?;
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let mut t = Tensor::zeros(shape.clone());
                match init {
                    Init::Zero => {}
                    Init::Fan => {
                        let s = 1.0 / (shape[0] as f64).sqrt();
                        t.data_mut().iter_mut().for_each(|v| *v = s * rng.normal());
                    }
                    Init::Normal(s) => t.data_mut().iter_mut().for_each(|v| *v = s * rng.normal()),
                    Init::Modulation { chunks, gates } => {
                        let cols = shape[1];
                        let w = cols / chunks;
                        let s = 0.1 / (shape[0] as f64).sqrt();
                        for (j, v) in t.data_mut().iter_mut().enumerate() {
                            let chunk = (j % cols) / w;
                            let z = rng.normal();
                            if !gates.contains(&chunk) {
                                *v = s * z;
                            }
                        }
                    }
                }
                ParamEntry { name, tensor: t }
            })
            .collect::<Vec<_>>();
        Ok(entries.into())
    }

    /// Checks that names and shapes match what `cfg` requires.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<(), NetError> {
        let want = layout(cfg);
        if want.len() != self.entries.len() {
            return Err(NetError::Layout(format!("expected {} tensors, found {}", want.len(), self.entries.len())));
        }
        for ((name, shape, _), e) in want.iter().zip(&self.entries) {
            if *name != e.name || shape.as_slice() != e.tensor.shape() {
                return Err(NetError::Layout(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    e.name,
                    e.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fixed sinusoid frequencies, geometric from 1 to `MAX_FREQ`.
const MAX_FREQ: f64 = 64.0;

fn frequencies(n: usize) -> Tensor {
    let data = (0..n).map(|i| (MAX_FREQ.ln() * i as f64 / (n - 1) as f64).exp()).collect();
    Tensor::from_parts(vec![1, n], data)
}

/// `[sin(t f), cos(t f)]` features of a `[n, 1]` time column.
pub(crate) fn fourier_features(g: &mut Graph, t: Var, n_freq: usize) -> Var {
    let freq = g.constant(frequencies(n_freq));
    let arg = g.matmul(t, freq);
    let s = g.sin(arg);
    let c = g.cos(arg);
    g.concat_last(&[s, c])
}

fn timestep_embed(g: &mut Graph, p: &BoundParams, prefix: &str, t: Var, cfg: &NetConfig) -> Var {
    let feats = fourier_features(g, t, cfg.fourier_dim);
    let h = g.linear(feats, p.var(&format!("{prefix}.fc1.w")), p.var(&format!("{prefix}.fc1.b")));
    let h = g.silu(h);
    g.linear(h, p.var(&format!("{prefix}.fc2.w")), p.var(&format!("{prefix}.fc2.b")))
}

/// Per-row timestep embedding `[n] -> [n, time_embed_dim]` as a plain tensor.
pub fn embed_time(params: &Params, cfg: &NetConfig, t: &[f64]) -> Tensor {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let tv = g.constant(Tensor::from_parts(vec![t.len(), 1], t.to_vec()));
    let e = timestep_embed(&mut g, &p, "t_embed", tv, cfg);
    g.value(e).clone()
}

/// Activations captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Residual stream after each block.
    pub blocks: Vec<Tensor>,
    /// Attention probabilities `[n, tokens, tokens]` per block (if enabled).
    pub attention: Vec<Tensor>,
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x);
    let s1 = g.add_scalar(scale, 1.0);
    let m = g.mul(n, s1);
    g.add(m, shift)
}

fn attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &NetConfig,
    trace: &mut Option<&mut Trace>,
) -> Var {
    let n = g.value(x).rows();
    let (tk, dh) = (cfg.tokens, cfg.head_dim());
    let xt = g.reshape(x, &[n, tk, dh]);
    let mut q = g.matmul(xt, p.var(&format!("{prefix}.attn.q.w")));
    let mut k = g.matmul(xt, p.var(&format!("{prefix}.attn.k.w")));
    let v = g.matmul(xt, p.var(&format!("{prefix}.attn.v.w")));
    if cfg.qk_norm {
        q = g.rms_norm(q);
        k = g.rms_norm(k);
    }
    let logits = g.batch_matmul(q, k, true);
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let probs = g.softmax(logits);
    if let Some(tr) = trace.as_deref_mut() {
        tr.attention.push(g.value(probs).clone());
    }
    let o = g.batch_matmul(probs, v, false);
    let o = g.reshape(o, &[n, cfg.width]);
    g.linear(o, p.var(&format!("{prefix}.attn.o.w")), p.var(&format!("{prefix}.attn.o.b")))
}

fn block(
    g: &mut Graph,
    p: &BoundParams,
    i: usize,
    h: Var,
    cond: Var,
    cfg: &NetConfig,
    trace: &mut Option<&mut Trace>,
) -> Var {
    let prefix = block_prefix(i);
    let w = cfg.width;
    let m = g.linear(cond, p.var(&format!("{prefix}.mod.w")), p.var(&format!("{prefix}.mod.b")));
    let mut h = h;
    let mut off = 0;
    if cfg.attention {
        let shift = g.slice_last(m, 0, w);
        let scale = g.slice_last(m, w, w);
        let gate = g.slice_last(m, 2 * w, w);
        let a_in = modulate(g, h, shift, scale);
        let a = attention(g, p, &prefix, a_in, cfg, trace);
        let ga = g.mul(gate, a);
        h = g.add(h, ga);
        off = 3 * w;
    }
    let shift = g.slice_last(m, off, w);
    let scale = g.slice_last(m, off + w, w);
    let gate = g.slice_last(m, off + 2 * w, w);
    let x = modulate(g, h, shift, scale);
    let x = g.linear(x, p.var(&format!("{prefix}.mlp.fc1.w")), p.var(&format!("{prefix}.mlp.fc1.b")));
    let x = g.silu(x);
    let x = g.linear(x, p.var(&format!("{prefix}.mlp.fc2.w")), p.var(&format!("{prefix}.mlp.fc2.b")));
    let gx = g.mul(gate, x);
    g.add(h, gx)
}

pub fn label_indices(y: &[Label], cfg: &NetConfig) -> Result<Vec<usize>, NetError> {
    y.iter()
        .map(|l| match *l {
            None => Ok(cfg.num_classes),
            Some(c) if c < cfg.num_classes => Ok(c),
            Some(c) => Err(NetError::ClassOutOfRange { index: c, classes: cfg.num_classes }),
        })
        .collect()
}

/// Network forward on a graph.
///
/// `x` is `[n, input_dim]`; `t` and `r` are `[n, 1]` time columns. Tangents
/// seeded on any of them propagate to the output.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &NetConfig,
    x: Var,
    t: Var,
    r: Var,
    y: &[Label],
    mut trace: Option<&mut Trace>,
) -> Result<Var, NetError> {
    let n = g.value(x).rows();
    if g.value(x).cols() != cfg.input_dim || g.value(t).len() != n || g.value(r).len() != n || y.len() != n {
        return Err(NetError::BadInput(g.value(x).shape().to_vec()));
    }
    let idx = label_indices(y, cfg)?;
    let y_emb = g.gather_rows(p.var("y_embed.table"), &idx);
    let t_emb = timestep_embed(g, p, "t_embed", t, cfg);

    let (c_enc, c_dec) = match cfg.arch {
        Arch::Flow => {
            let c = g.add(t_emb, y_emb);
            (c, c)
        }
        Arch::JointMap => {
            let gap = g.sub(t, r);
            let r_emb = timestep_embed(g, p, "r_embed", gap, cfg);
            let c = g.add(t_emb, r_emb);
            let c = g.add(c, y_emb);
            (c, c)
        }
        Arch::DecoupledMap => {
            let r_emb = timestep_embed(g, p, "t_embed", r, cfg);
            (g.add(t_emb, y_emb), g.add(r_emb, y_emb))
        }
    };
    let s_enc = g.silu(c_enc);
    let s_dec = if c_dec == c_enc { s_enc } else { g.silu(c_dec) };
    let encoder_blocks = if cfg.arch == Arch::DecoupledMap { cfg.split } else { cfg.depth };

    let mut h = g.linear(x, p.var("in_proj.w"), p.var("in_proj.b"));
    for i in 0..cfg.depth {
        let cond = if i < encoder_blocks { s_enc } else { s_dec };
        h = block(g, p, i, h, cond, cfg, &mut trace);
        if !g.value(h).is_finite() {
            return Err(NetError::NonFinite { block: i });
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.blocks.push(g.value(h).clone());
        }
    }
    let w = cfg.width;
    let m = g.linear(s_dec, p.var("head.mod.w"), p.var("head.mod.b"));
    let shift = g.slice_last(m, 0, w);
    let scale = g.slice_last(m, w, w);
    let h = modulate(g, h, shift, scale);
    let out = g.linear(h, p.var("head.out.w"), p.var("head.out.b"));
    if !g.value(out).is_finite() {
        return Err(NetError::NonFinite { block: cfg.depth });
    }
    Ok(out)
}

pub(crate) fn time_column(t: &[f64]) -> Tensor {
    Tensor::from_parts(vec![t.len(), 1], t.to_vec())
}

/// Plain evaluation `u(x, t, r, y)` with one time pair per row.
pub fn forward(
    params: &Params,
    cfg: &NetConfig,
    x: &Tensor,
    t: &[f64],
    r: &[f64],
    y: &[Label],
) -> Result<Tensor, NetError> {
    forward_traced(params, cfg, x, t, r, y, None)
}

pub fn forward_traced(
    params: &Params,
    cfg: &NetConfig,
    x: &Tensor,
    t: &[f64],
    r: &[f64],
    y: &[Label],
    trace: Option<&mut Trace>,
) -> Result<Tensor, NetError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let tv = g.constant(time_column(t));
    let rv = g.constant(time_column(r));
    let out = forward_graph(&mut g, &p, cfg, xv, tv, rv, y, trace)?;
    Ok(g.value(out).clone())
}

/// Reinterprets a trained flow network as a decoupled flow map with `split`
/// encoder blocks. Weights are copied verbatim.
pub fn convert_flow_to_map(params: &Params, cfg: &NetConfig, split: usize) -> Result<(Params, NetConfig), NetError> {
    if cfg.arch != Arch::Flow {
        return Err(NetError::ArchMismatch { expected: Arch::Flow, actual: cfg.arch });
    }
    let mut map_cfg = cfg.clone();
    map_cfg.arch = Arch::DecoupledMap;
    map_cfg.split = split;
    map_cfg.validate()?;
    params.check_layout(&map_cfg)?;
    Ok((params.clone(), map_cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMode {
    All,
    DecoderOnly,
}

/// Trainable flag per parameter tensor.
///
/// `DecoderOnly` trains the decoder blocks, the output head and the timestep
/// embedding; the input projection, encoder blocks and class table stay fixed.
pub fn freeze_mask(params: &Params, cfg: &NetConfig, mode: FreezeMode) -> Result<Vec<bool>, NetError> {
    match mode {
        FreezeMode::All => Ok(vec![true; params.len()]),
        FreezeMode::DecoderOnly => {
            if cfg.arch != Arch::DecoupledMap {
                return Err(NetError::ArchMismatch { expected: Arch::DecoupledMap, actual: cfg.arch });
            }
            Ok(params
                .names()
                .map(|name| {
                    if name.starts_with("t_embed.") || name.starts_with("head.") {
                        return true;
                    }
                    match name.strip_prefix("blocks.") {
                        Some(rest) => {
                            let i: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                            i >= cfg.split
                        }
                        None => false,
                    }
                })
                .collect())
        }
    }
}
