//! Decoupled flow-map laboratory on two-dimensional toy distributions.
//!
//! The crate trains a conditioned residual network as a flow model, converts
//! it into a flow map by routing the next timestep into the decoder blocks,
//! fine-tunes it with JVP-based mean-velocity targets, and samples it with
//! Euler, Heun, SDE, restart and CTM-style samplers. Closed-form Gaussian and
//! mixture oracles provide ground truth for every stage.

pub mod bench;
pub mod net;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod process;
pub mod sampler;
pub mod trainer;

pub use numerics::{Graph, NumericsError, RngStream, Tensor, Var};
