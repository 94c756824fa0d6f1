//! Toy datasets, sample-quality metrics and JSON-lines reports.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::Label;
use crate::numerics::{RngStream, Tensor};
use crate::oracle::{GaussianSpec, GmmSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("empty point set")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("malformed points file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    4.0
}
fn default_ring_scale() -> f64 {
    0.3
}
fn default_true() -> bool {
    true
}
fn default_cells() -> usize {
    4
}
fn default_moon_noise() -> f64 {
    0.1
}

/// Two-dimensional toy distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussian {
        mean: Vec<f64>,
        scale: f64,
    },
    /// Equal-weight modes on a circle; the label is the mode index.
    GmmRing {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_ring_scale")]
        scale: f64,
        #[serde(default = "default_true")]
        labeled: bool,
    },
    /// Uniform over the dark squares of a `cells × cells` board on `[−2, 2]²`.
    Checkerboard {
        #[serde(default = "default_cells")]
        cells: usize,
    },
    /// Two interleaved half circles; the label is the moon index.
    TwoMoons {
        #[serde(default = "default_moon_noise")]
        noise: f64,
        #[serde(default = "default_true")]
        labeled: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::gmm_ring(8, 4.0, 0.3)
    }
}

impl DatasetSpec {
    pub fn gmm_ring(modes: usize, radius: f64, scale: f64) -> Self {
        Self::GmmRing { modes, radius, scale, labeled: true }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidDataset(m.to_owned()));
        match self {
            Self::Gaussian { mean, scale } => {
                if mean.is_empty() || !(*scale >= 0.0) {
                    return bad("gaussian needs a nonempty mean and scale >= 0");
                }
            }
            Self::GmmRing { modes, radius, scale, .. } => {
                if *modes == 0 || !(*radius >= 0.0) || !(*scale >= 0.0) {
                    return bad("gmm-ring needs modes >= 1, radius >= 0, scale >= 0");
                }
            }
            Self::Checkerboard { cells } => {
                if *cells < 2 {
                    return bad("checkerboard needs at least 2 cells per side");
                }
            }
            Self::TwoMoons { noise, .. } => {
                if !(*noise >= 0.0) {
                    return bad("two-moons noise must be >= 0");
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    /// Number of real classes (0 for unlabeled data).
    pub fn num_classes(&self) -> usize {
        match self {
            Self::GmmRing { modes, labeled: true, .. } => *modes,
            Self::TwoMoons { labeled: true, .. } => 2,
            _ => 0,
        }
    }

    /// The mixture behind `gmm-ring`, if any.
    pub fn gmm(&self) -> Option<GmmSpec> {
        match self {
            Self::GmmRing { modes, radius, scale, .. } => Some(GmmSpec::ring(*modes, *radius, *scale)),
            _ => None,
        }
    }

    pub fn gaussian(&self) -> Option<GaussianSpec> {
        match self {
            Self::Gaussian { mean, scale } => Some(GaussianSpec::new(mean.clone(), *scale)),
            _ => None,
        }
    }
}

/// `n` points and their labels, drawn in a fixed per-point order.
pub fn sample_dataset(spec: &DatasetSpec, n: usize, rng: &mut RngStream) -> Result<(Tensor, Vec<Label>), BenchError> {
    spec.validate()?;
    if n == 0 {
        return Err(BenchError::Empty);
    }
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec {
        DatasetSpec::Gaussian { mean, scale } => {
            for _ in 0..n {
                data.extend(mean.iter().map(|m| m + scale * rng.normal()));
                labels.push(None);
            }
        }
        DatasetSpec::GmmRing { modes, radius, scale, labeled } => {
            let g = GmmSpec::ring(*modes, *radius, *scale);
            for _ in 0..n {
                let k = rng.below(*modes);
                data.extend(g.means[k].iter().map(|m| m + scale * rng.normal()));
                labels.push(labeled.then_some(k));
            }
        }
        DatasetSpec::Checkerboard { cells } => {
            let c = *cells;
            let w = 4.0 / c as f64;
            for _ in 0..n {
                // Pick a row, then a dark column in that row.
                let i = rng.below(c);
                let dark: Vec<usize> = (0..c).filter(|j| (i + j) % 2 == 0).collect();
                let j = dark[rng.below(dark.len())];
                data.push(-2.0 + w * (j as f64 + rng.uniform()));
                data.push(-2.0 + w * (i as f64 + rng.uniform()));
                labels.push(None);
            }
        }
        DatasetSpec::TwoMoons { noise, labeled } => {
            for _ in 0..n {
                let k = rng.below(2);
                let a = std::f64::consts::PI * rng.uniform();
                let (x, y) = if k == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
                data.push(2.0 * (x - 0.5) + noise * rng.normal());
                data.push(2.0 * (y - 0.25) + noise * rng.normal());
                labels.push(labeled.then_some(k));
            }
        }
    }
    Ok((Tensor::new(vec![n, d], data).expect("dataset shape"), labels))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(), BenchError> {
    if a.is_empty() || b.is_empty() || a.rows() == 0 || b.rows() == 0 {
        return Err(BenchError::Empty);
    }
    if a.cols() != b.cols() {
        return Err(BenchError::Dim(a.cols(), b.cols()));
    }
    Ok(())
}

/// `n_proj` random unit directions in `dim` dimensions.
pub fn projections(n_proj: usize, dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n_proj).map(|_| rng.unit_vector(dim)).collect()
}

fn project_sorted(a: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().zip(dir).map(|(x, d)| x * d).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Squared 1-D Wasserstein-2 distance between two sorted empirical samples,
/// integrating the quantile difference exactly over the merged breakpoints.
pub fn w2_squared_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut u, mut acc) = (0.0f64, 0.0f64);
    while i < a.len() && j < b.len() {
        let next = ((i + 1) as f64 / na).min((j + 1) as f64 / nb);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if (i + 1) as f64 / na <= next {
            i += 1;
        }
        if (j + 1) as f64 / nb <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced Wasserstein-2 on fixed directions: root of the mean squared 1-D W2.
pub fn sliced_w2_with(a: &Tensor, b: &Tensor, dirs: &[Vec<f64>]) -> Result<f64, BenchError> {
    check_pair(a, b)?;
    if dirs.is_empty() {
        return Err(BenchError::Empty);
    }
    let total: f64 = dirs.iter().map(|d| w2_squared_1d(&project_sorted(a, d), &project_sorted(b, d))).sum();
    Ok((total / dirs.len() as f64).sqrt())
}

pub fn sliced_w2(a: &Tensor, b: &Tensor, n_proj: usize, rng: &mut RngStream) -> Result<f64, BenchError> {
    check_pair(a, b)?;
    let dirs = projections(n_proj, a.cols(), rng);
    sliced_w2_with(a, b, &dirs)
}

/// How the within-set terms of the energy distance are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyEstimator {
    /// Within-set means exclude the diagonal (unbiased).
    U,
    /// All pairs including the diagonal; exactly zero for identical sets.
    V,
}

fn mean_pair_dist(a: &Tensor, b: &Tensor, skip_diag: bool) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            s += ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    let pairs = a.rows() * b.rows() - if skip_diag { a.rows() } else { 0 };
    s / pairs as f64
}

/// `2 E‖a − b‖ − E‖a − a'‖ − E‖b − b'‖`
pub fn energy_distance_with(a: &Tensor, b: &Tensor, est: EnergyEstimator) -> Result<f64, BenchError> {
    check_pair(a, b)?;
    let skip = est == EnergyEstimator::U;
    if skip && (a.rows() < 2 || b.rows() < 2) {
        return Err(BenchError::Empty);
    }
    Ok(2.0 * mean_pair_dist(a, b, false) - mean_pair_dist(a, a, skip) - mean_pair_dist(b, b, skip))
}

pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64, BenchError> {
    energy_distance_with(a, b, EnergyEstimator::U)
}

/// Fraction of samples near each mode, plus the unassigned remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fractions: Vec<f64>,
    pub remainder: f64,
}

/// Assigns each sample to the nearest mode whose centre lies within
/// `multiplier · s_k`.
pub fn mode_coverage(samples: &Tensor, gmm: &GmmSpec, multiplier: f64) -> Result<Coverage, BenchError> {
    if samples.rows() == 0 || samples.is_empty() {
        return Err(BenchError::Empty);
    }
    if samples.cols() != gmm.dim() {
        return Err(BenchError::Dim(samples.cols(), gmm.dim()));
    }
    let mut counts = vec![0usize; gmm.len()];
    let mut rest = 0usize;
    for i in 0..samples.rows() {
        let x = samples.row(i);
        let best = (0..gmm.len())
            .map(|k| {
                let d2: f64 = x.iter().zip(&gmm.means[k]).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d2.sqrt())
            })
            .filter(|&(k, d)| d <= multiplier * gmm.scales[k])
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((k, _)) => counts[k] += 1,
            None => rest += 1,
        }
    }
    let n = samples.rows() as f64;
    Ok(Coverage { fractions: counts.iter().map(|&c| c as f64 / n).collect(), remainder: rest as f64 / n })
}

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub sliced_w2: f64,
    pub energy_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Coverage>,
    pub nfe: usize,
    pub samples: usize,
    pub wall_time: f64,
}

impl MetricReport {
    /// Copy with `wall_time` zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }
}

/// Appends `report` as one JSON line.
pub fn emit_report(path: &Path, report: &MetricReport) -> Result<(), BenchError> {
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>, BenchError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn column_names(d: usize) -> Vec<String> {
    if d == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    }
}

/// CSV with coordinate columns then `label` (empty when unlabeled).
pub fn write_points_csv(path: &Path, points: &Tensor, labels: &[Label]) -> Result<(), BenchError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{},label", column_names(points.cols()).join(","))?;
    for i in 0..points.rows() {
        for v in points.row(i) {
            write!(out, "{v:?},")?;
        }
        match labels.get(i).copied().flatten() {
            Some(c) => writeln!(out, "{c}")?,
            None => writeln!(out)?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<(Tensor, Vec<Label>), BenchError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines.next().ok_or(BenchError::Empty)??;
    let d = header.split(',').count().saturating_sub(1);
    if d == 0 {
        return Err(BenchError::Parse { line: 1, msg: "no coordinate columns".into() });
    }
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let err = |msg: String| BenchError::Parse { line: k + 2, msg };
        if fields.len() != d + 1 {
            return Err(err(format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        for f in &fields[..d] {
            data.push(f.trim().parse::<f64>().map_err(|e| err(e.to_string()))?);
        }
        let l = fields[d].trim();
        labels.push(if l.is_empty() { None } else { Some(l.parse::<usize>().map_err(|e| err(e.to_string()))?) });
    }
    if labels.is_empty() {
        return Err(BenchError::Empty);
    }
    Ok((Tensor::new(vec![labels.len(), d], data).expect("points shape"), labels))
}
