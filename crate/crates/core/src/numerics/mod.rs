//! Dense tensors, a recording autodiff graph (reverse mode plus eager
//! forward-mode tangents), and replayable random streams.

mod graph;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use rng::{rng_fork, RngState, RngStream};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("operation `{0}` has no derivative rule")]
    UnsupportedOp(&'static str),
    #[error("non-finite loss {value}: {stats}")]
    NonFiniteLoss { value: f64, stats: String },
}

/// Value and directional derivative `(f(x), J_f(x)·v)` from one forward pass.
pub fn jvp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor), NumericsError>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    if x.shape() != v.shape() {
        return Err(NumericsError::ShapeMismatch { op: "jvp", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    let mut g = Graph::new();
    let xv = g.dual(x.clone(), v.clone());
    let y = f(&mut g, xv)?;
    let tangent = g.tangent_or_zeros(y);
    Ok((g.value(y).clone(), tangent))
}

/// Loss value and gradients with respect to each tensor in `params`.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>), NumericsError>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss);
    if value.len() != 1 {
        return Err(NumericsError::ShapeMismatch { op: "grad", lhs: value.shape().to_vec(), rhs: vec![] });
    }
    let lv = value.item();
    if !lv.is_finite() {
        let stats = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let bad = p.data().iter().filter(|v| !v.is_finite()).count();
                format!(
                    "param[{i}]: non-finite={bad} max|.|={:.3e}",
                    p.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(NumericsError::NonFiniteLoss { value: lv, stats });
    }
    let grads = g.backward(loss)?;
    let out = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
    Ok((lv, out))
}
