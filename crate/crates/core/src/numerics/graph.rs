//! Recording graph with eager forward-mode tangents and reverse-mode adjoints.
//!
//! Every primitive computes its primal value and, when any input carries a
//! tangent, its directional derivative in the same call. `backward` replays
//! the recorded ops in reverse creation order, which fixes the accumulation
//! order and keeps gradients bit-reproducible.

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    LayerNorm { x: Var, inv: Vec<f64> },
    RmsNorm { x: Var, inv: Vec<f64> },
    Softmax(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    MeanLast(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Custom { x: Var, name: &'static str },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    op: Op,
    grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, materializing zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, tangent: Option<Tensor>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, tangent, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn tangent(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].tangent.as_ref()
    }

    /// Tangent of `v`, with zeros when no tangent flowed into it.
    pub fn tangent_or_zeros(&self, v: Var) -> Tensor {
        self.tangent(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    // ---- leaves ----------------------------------------------------------

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Leaf, true)
    }

    /// Leaf that neither receives gradients nor carries a tangent.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Leaf, false)
    }

    /// Leaf seeded with a forward-mode tangent. Panics if shapes differ.
    pub fn dual(&mut self, value: Tensor, tangent: Tensor) -> Var {
        assert_eq!(value.shape(), tangent.shape(), "tangent shape must equal primal shape");
        self.push(value, Some(tangent), Op::Leaf, false)
    }

    /// General leaf.
    pub fn leaf(&mut self, value: Tensor, tangent: Option<Tensor>, requires_grad: bool) -> Var {
        if let Some(t) = &tangent {
            assert_eq!(value.shape(), t.shape(), "tangent shape must equal primal shape");
        }
        self.push(value, tangent, Op::Leaf, requires_grad)
    }

    /// Same value; no adjoint and no tangent flow through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, None, Op::StopGrad, false)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_tangent(&self, a: Var, b: Var, f: impl Fn(Option<&Tensor>, Option<&Tensor>) -> Tensor) -> Option<Tensor> {
        let (ta, tb) = (self.tangent(a), self.tangent(b));
        if ta.is_none() && tb.is_none() {
            None
        } else {
            Some(f(ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let tangent = self.binary_tangent(a, b, |ta, tb| match (ta, tb) {
            (Some(x), Some(y)) => x.add(y),
            (Some(x), None) | (None, Some(x)) => x.clone(),
            (None, None) => unreachable!(),
        });
        let grad = self.grad_of(&[a, b]);
        self.push(value, tangent, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let tangent = self.binary_tangent(a, b, |ta, tb| match (ta, tb) {
            (Some(x), Some(y)) => x.sub(y),
            (Some(x), None) => x.clone(),
            (None, Some(y)) => y.scale(-1.0),
            (None, None) => unreachable!(),
        });
        let grad = self.grad_of(&[a, b]);
        self.push(value, tangent, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.zip_map(vb, |x, y| x * y);
        let tangent = self.binary_tangent(a, b, |ta, tb| {
            let mut out = match ta {
                Some(t) => t.zip_map(vb, |x, y| x * y),
                None => Tensor::zeros(va.shape().to_vec()),
            };
            if let Some(t) = tb {
                for ((o, &dt), &x) in out.data_mut().iter_mut().zip(t.data()).zip(va.data()) {
                    *o += x * dt;
                }
            }
            out
        });
        let grad = self.grad_of(&[a, b]);
        self.push(value, tangent, Op::Mul(a, b), grad)
    }

    /// `x[.., n] + bias[n]`, broadcasting over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        assert_eq!(vb.len(), n, "bias length must equal the last axis");
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let tangent = self.binary_tangent(x, bias, |tx, tb| {
            let mut out = match tx {
                Some(t) => t.clone(),
                None => Tensor::zeros(vx.shape().to_vec()),
            };
            if let Some(tb) = tb {
                for row in out.data_mut().chunks_mut(n) {
                    for (o, &b) in row.iter_mut().zip(tb.data()) {
                        *o += b;
                    }
                }
            }
            out
        });
        let grad = self.grad_of(&[x, bias]);
        self.push(value, tangent, Op::AddBias(x, bias), grad)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scale(k);
        let tangent = self.tangent(x).map(|t| t.scale(k));
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::Scale(x, k), grad)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v + k);
        let tangent = self.tangent(x).cloned();
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::AddScalar(x), grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let value = vx.map(&f);
        let tangent = self.tangent(x).map(|t| t.zip_map(vx, |dt, xv| df(xv) * dt));
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, op, grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, silu_grad, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |v| 1.0 / v, Op::Log(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, f64::cos, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |v| -v.sin(), Op::Cos(x))
    }

    /// Elementwise map with no derivative rule. Fails if a tangent would
    /// have to flow through it; `backward` fails if an adjoint reaches it.
    pub fn custom(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        if self.tangent(x).is_some() {
            return Err(NumericsError::UnsupportedOp(name));
        }
        let value = self.value(x).map(f);
        let grad = self.grad_of(&[x]);
        Ok(self.push(value, None, Op::Custom { x, name }, grad))
    }

    // ---- linear algebra --------------------------------------------------

    /// `x[.., k] · w[k, n] -> [.., n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.cols(), k, "matmul inner dimension mismatch");
        let m = vx.rows();
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().expect("matmul input must have rank >= 1") = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, vx.data(), false, vw.data(), false, &mut out, false);
        let value = Tensor::from_parts(out_shape.clone(), out);
        let tangent = self.binary_tangent(x, w, |tx, tw| {
            let mut out = vec![0.0; m * n];
            let mut touched = false;
            if let Some(tx) = tx {
                gemm(m, k, n, tx.data(), false, vw.data(), false, &mut out, false);
                touched = true;
            }
            if let Some(tw) = tw {
                gemm(m, k, n, vx.data(), false, tw.data(), false, &mut out, touched);
            }
            Tensor::from_parts(out_shape.clone(), out)
        });
        let grad = self.grad_of(&[x, w]);
        self.push(value, tangent, Op::MatMul(x, w), grad)
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 3, "batch_matmul lhs must be 3-D");
        assert_eq!(vb.shape().len(), 3, "batch_matmul rhs must be 3-D");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = if trans_b { vb.shape()[1] } else { vb.shape()[2] };
        let kb = if trans_b { vb.shape()[2] } else { vb.shape()[1] };
        assert_eq!(vb.shape()[0], bs, "batch_matmul batch mismatch");
        assert_eq!(kb, k, "batch_matmul inner dimension mismatch");
        let run = |lhs: &Tensor, rhs: &Tensor, out: &mut [f64], acc: bool| {
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &lhs.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &rhs.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    acc,
                );
            }
        };
        let mut out = vec![0.0; bs * m * n];
        run(va, vb, &mut out, false);
        let value = Tensor::from_parts(vec![bs, m, n], out);
        let tangent = self.binary_tangent(a, b, |ta, tb| {
            let mut out = vec![0.0; bs * m * n];
            let mut touched = false;
            if let Some(ta) = ta {
                run(ta, vb, &mut out, false);
                touched = true;
            }
            if let Some(tb) = tb {
                run(va, tb, &mut out, touched);
            }
            Tensor::from_parts(vec![bs, m, n], out)
        });
        let grad = self.grad_of(&[a, b]);
        self.push(value, tangent, Op::BatchMatMul { a, b, trans_b }, grad)
    }

    // ---- row-wise kernels ------------------------------------------------

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.clone();
        let mut inv = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv.push(s);
        }
        let tangent = self.tangent(x).map(|t| layer_norm_adjoint(&out, &inv, t));
        let grad = self.grad_of(&[x]);
        self.push(out, tangent, Op::LayerNorm { x, inv }, grad)
    }

    /// Divides each row by its root-mean-square (no gain).
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.clone();
        let mut inv = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let s = 1.0 / (ms + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= s);
            inv.push(s);
        }
        let tangent = self.tangent(x).map(|t| rms_norm_adjoint(&out, &inv, t));
        let grad = self.grad_of(&[x]);
        self.push(out, tangent, Op::RmsNorm { x, inv }, grad)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let tangent = self.tangent(x).map(|t| softmax_adjoint(&out, t));
        let grad = self.grad_of(&[x]);
        self.push(out, tangent, Op::Softmax(x), grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value =
            Tensor::new(shape.to_vec(), self.value(x).data().to_vec()).expect("reshape must preserve element count");
        let tangent = self.tangent(x).map(|t| Tensor::from_parts(shape.to_vec(), t.data().to_vec()));
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::Reshape(x), grad)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading axes mismatch");
        }
        let total: usize = widths.iter().sum();
        let gather = |pick: &dyn Fn(Var) -> Option<Tensor>| {
            let mut out = vec![0.0; rows * total];
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(src) = pick(p) {
                    for r in 0..rows {
                        out[r * total + off..r * total + off + w].copy_from_slice(src.row(r));
                    }
                }
                off += w;
            }
            let mut shape = lead.clone();
            shape.push(total);
            Tensor::from_parts(shape, out)
        };
        let value = gather(&|p| Some(self.value(p).clone()));
        let any_tangent = parts.iter().any(|&p| self.tangent(p).is_some());
        let tangent = any_tangent.then(|| gather(&|p| self.tangent(p).cloned()));
        let grad = self.grad_of(parts);
        self.push(value, tangent, Op::ConcatLast(parts.to_vec()), grad)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        assert!(start + len <= n, "slice out of range");
        let cut = |t: &Tensor| {
            let mut out = Vec::with_capacity(t.rows() * len);
            for row in t.data().chunks(n) {
                out.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, out)
        };
        let value = cut(vx);
        let tangent = self.tangent(x).map(cut);
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::SliceLast { x, start }, grad)
    }

    /// Row lookup `table[idx[i], :]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.shape().len(), 2, "gather table must be 2-D");
        let n_rows = vt.shape()[0];
        assert!(idx.iter().all(|&i| i < n_rows), "gather index out of range");
        let value = vt.select_rows(idx);
        let tangent = self.tangent(table).map(|t| t.select_rows(idx));
        let grad = self.grad_of(&[table]);
        self.push(value, tangent, Op::Gather { table, idx: idx.to_vec() }, grad)
    }

    /// Mean over the last axis: `[.., n] -> [..]`.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let reduce = |t: &Tensor| {
            let data: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let s = t.shape();
            Tensor::from_parts(s[..s.len() - 1].to_vec(), data)
        };
        let value = reduce(vx);
        let tangent = self.tangent(x).map(reduce);
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::MeanLast(x), grad)
    }

    /// Scalar `Σ_i w_i x_i` over all elements.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), weights.len(), "weighted_sum length mismatch");
        let dot = |t: &Tensor| Tensor::scalar(t.data().iter().zip(&weights).map(|(a, b)| a * b).sum());
        let value = dot(vx);
        let tangent = self.tangent(x).map(dot);
        let grad = self.grad_of(&[x]);
        self.push(value, tangent, Op::WeightedSum { x, weights }, grad)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0; n])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    // ---- composite helpers -----------------------------------------------

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    // ---- reverse mode ----------------------------------------------------

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::ShapeMismatch { op: "backward", lhs: lv.shape().to_vec(), rhs: vec![] });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].grad {
            return Ok(Gradients { adj });
        }
        adj[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].grad {
                    self.accumulate(adj, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.nodes[b.0].grad {
                    self.accumulate(adj, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(adj, *x, g.clone());
                if self.nodes[bias.0].grad {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(adj, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::Scale(x, k) => self.accumulate(adj, *x, g.scale(*k)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(adj, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.rows();
                if self.nodes[x.0].grad {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vw.data(), true, &mut dx, false);
                    self.accumulate(adj, *x, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                if self.nodes[w.0].grad {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, vx.data(), true, g.data(), false, &mut dw, false);
                    self.accumulate(adj, *w, Tensor::from_parts(vec![k, n], dw));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = g.shape()[2];
                if self.nodes[a.0].grad {
                    let mut da = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        // da = g · bᵀ  (b stored [k,n]) or g · b (b stored [n,k])
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[s * m * n..(s + 1) * m * n],
                            false,
                            &vb.data()[s * k * n..(s + 1) * k * n],
                            !*trans_b,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(adj, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if self.nodes[b.0].grad {
                    let mut db = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        let as_ = &va.data()[s * m * k..(s + 1) * m * k];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // db[n,k] = gᵀ[n,m] · a[m,k]
                            gemm(n, m, k, gs, true, as_, false, out, false);
                        } else {
                            // db[k,n] = aᵀ[k,m] · g[m,n]
                            gemm(k, m, n, as_, true, gs, false, out, false);
                        }
                    }
                    self.accumulate(adj, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * silu_grad(xv));
                self.accumulate(adj, *x, d);
            }
            Op::Exp(x) => {
                let d = g.zip_map(&node.value, |gv, e| gv * e);
                self.accumulate(adj, *x, d);
            }
            Op::Log(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                self.accumulate(adj, *x, d);
            }
            Op::Sin(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * xv.cos());
                self.accumulate(adj, *x, d);
            }
            Op::Cos(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| -gv * xv.sin());
                self.accumulate(adj, *x, d);
            }
            Op::LayerNorm { x, inv } => {
                self.accumulate(adj, *x, layer_norm_adjoint(&node.value, inv, g));
            }
            Op::RmsNorm { x, inv } => {
                self.accumulate(adj, *x, rms_norm_adjoint(&node.value, inv, g));
            }
            Op::Softmax(x) => self.accumulate(adj, *x, softmax_adjoint(&node.value, g)),
            Op::ConcatLast(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.nodes[p.0].grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(adj, p, Tensor::from_parts(vp.shape().to_vec(), d));
                    }
                    off += w;
                }
            }
            Op::SliceLast { x, start } => {
                let vx = self.value(*x);
                let n = vx.cols();
                let len = g.cols();
                let mut d = vec![0.0; vx.len()];
                for (r, row) in g.data().chunks(len).enumerate() {
                    d[r * n + start..r * n + start + len].copy_from_slice(row);
                }
                self.accumulate(adj, *x, Tensor::from_parts(vx.shape().to_vec(), d));
            }
            Op::Gather { table, idx } => {
                let vt = self.value(*table);
                let w = vt.cols();
                let mut d = Tensor::zeros(vt.shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                        *o += v;
                    }
                }
                self.accumulate(adj, *table, d);
            }
            Op::MeanLast(x) => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut d = Vec::with_capacity(vx.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                self.accumulate(adj, *x, Tensor::from_parts(vx.shape().to_vec(), d));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.item();
                let shape = self.shape(*x).to_vec();
                let d = weights.iter().map(|w| w * gv).collect();
                self.accumulate(adj, *x, Tensor::from_parts(shape, d));
            }
            Op::Custom { x, name } => {
                if self.nodes[x.0].grad {
                    return Err(NumericsError::UnsupportedOp(name));
                }
            }
        }
        Ok(())
    }
}

/// Shared by the LayerNorm JVP and VJP: the Jacobian is symmetric.
fn layer_norm_adjoint(y: &Tensor, inv: &[f64], g: &Tensor) -> Tensor {
    let n = y.cols();
    let mut out = g.clone();
    for ((row, yr), &s) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(inv) {
        let mg = row.iter().sum::<f64>() / n as f64;
        let mgy = row.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (o, &yv) in row.iter_mut().zip(yr) {
            *o = (*o - mg - yv * mgy) * s;
        }
    }
    out
}

fn rms_norm_adjoint(y: &Tensor, inv: &[f64], g: &Tensor) -> Tensor {
    let n = y.cols();
    let mut out = g.clone();
    for ((row, yr), &s) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(inv) {
        let mgy = row.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (o, &yv) in row.iter_mut().zip(yr) {
            *o = (*o - yv * mgy) * s;
        }
    }
    out
}

fn softmax_adjoint(p: &Tensor, g: &Tensor) -> Tensor {
    let n = p.cols();
    let mut out = g.clone();
    for (row, pr) in out.data_mut().chunks_mut(n).zip(p.data().chunks(n)) {
        let s: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
        for (o, &pv) in row.iter_mut().zip(pr) {
            *o = pv * (*o - s);
        }
    }
    out
}
