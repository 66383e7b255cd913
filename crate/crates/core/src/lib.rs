//! Deep 2BSDE solver for high-dimensional fully nonlinear parabolic PDEs.
//!
//! The crate trains per-time-step networks approximating the Hessian and
//! the drift of the gradient of the solution along simulated paths, so that
//! the forward Euler recursion for `(Y, Z)` hits the terminal condition.
//! The initial value head then approximates `u(0, ξ)`.
//!
//! Modules:
//! - [`tensor`]: dense tensors and the reverse-mode tape.
//! - [`network`]: flat parameter layout, subnetworks, batch normalization.
//! - [`dynamics`]: time grid, Brownian increments, forward paths.
//! - [`scheme`]: the merged forward recursion and the training loss.
//! - [`optim`]: SGD, Adam and learning-rate schedules.
//! - [`problems`]: the benchmark equations and config files.
//! - [`oracles`]: independent reference solvers.
//! - [`harness`]: multi-run experiments, aggregation, CSV output.

pub mod dynamics;
pub mod harness;
pub mod network;
pub mod optim;
pub mod oracles;
pub mod problems;
pub mod rng;
pub mod scheme;
pub mod tensor;

pub use dynamics::{BrownianBatch, Diffusion, PathBatch, TimeGrid, Transition};
pub use harness::{ExperimentConfig, RunStats, Trajectory};
pub use network::{Network, NetworkConfig, ParamVector};
pub use optim::{AdamConfig, OptimState, Optimizer, OptimizerConfig, Schedule};
pub use problems::{Equation, Framework, ProblemSpec, Terminal};
pub use scheme::{CoefficientModel, SchemeState};
pub use tensor::{NodeId, OpKind, Tape, Tensor, TensorError};

use thiserror::Error;

/// Top-level error for the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Layout(#[from] network::LayoutError),
    #[error(transparent)]
    Scheme(#[from] scheme::SchemeError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Problem(#[from] problems::ProblemError),
    #[error(transparent)]
    Oracle(#[from] oracles::OracleError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
