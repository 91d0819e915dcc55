//! Adaptive scenario-based MPC with a meta-learned Bayesian residual model.

pub mod autodiff;
pub mod dynamics;
pub mod harness;
pub mod io;
pub mod bnn;
pub mod config;
pub mod lpv;
pub mod meta;
pub mod optim;
pub mod pipeline;
pub mod plant;
pub mod scenario;
pub mod smpc;

/// Plant state `[x₁, x₂]`.
pub type State = [f64; 2];
/// Control input `[u₁, u₂]`.
pub type Input = [f64; 2];
