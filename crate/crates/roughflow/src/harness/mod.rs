//! Experiment drivers and the `roughflow` command line.
//!
//! Everything in this module is deterministic plumbing around the numerical
//! layers: a flat `key = value` configuration ([`ExperimentConfig`]), named
//! vector-field suites, three reproducible experiments, and file emission
//! (CSV tables plus JSON manifests carrying a `schema_version`).
//!
//! * [`wong_zakai_experiment`] solves along dyadic refinements `W(m)` of one
//!   fixed Brownian sample and tabulates the driver gap d_α(W(m), W(m+1))
//!   against the sup gap of the solutions, on ℝ^p and on a suspension space,
//!   level by level.
//! * [`support_skeleton_demo`] drives the solver with the lift of a
//!   Cameron-Martin path `h` and checks it against a classical Runge-Kutta
//!   integration of `dx = Σ V_i(x) h'^i dt + V_0(x) dt`, then reports how
//!   close random Brownian runs come to that skeleton. The demo is
//!   one-directional: skeleton points are realized and matched, density of
//!   the support is out of scope.
//! * [`ldp_experiment`] covers the small-noise side of the large-deviation
//!   picture: the exact rate value J(h) = ‖h‖²/2 for a supplied `h`, and
//!   per noise scale ε the fraction of seeds whose ε-scaled solution strays
//!   from the drift-only flow. Concentration is what gets tested, not the
//!   rate constant.
//!
//! Every experiment is a pure function of its configuration: fixed seed in,
//! byte-identical files out. Monte-Carlo sweeps derive one generator per
//! replica from the base seed and collect results in replica order, so the
//! fan-out could run concurrently without changing any output.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod io;
pub mod suites;

use thiserror::Error;

use crate::foliated::FoliatedError;
use crate::rde_solver::SolveError;
use crate::rough_lift::LiftError;
use crate::tensor_algebra::TensorError;

pub use cli::cli_dispatch;
pub use config::ExperimentConfig;
pub use experiments::{
    ldp_experiment, ramp_path, support_skeleton_demo, wong_zakai_experiment, ConvergenceTable,
    LdpReport, LdpRow, SupportReport, WongZakaiRow,
};
pub use suites::{FieldSuite, TransversalKind};

/// Version stamped into every JSON manifest and report this module emits.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Foliated(#[from] FoliatedError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
}

impl HarnessError {
    /// Process exit code for the CLI: 1 for configuration, input and i/o
    /// problems, 2 for failures inside the numerical kernels (explosion,
    /// singular Jacobians, runaway windings).
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Solve(_) | HarnessError::Foliated(_) | HarnessError::Tensor(_) => 2,
            _ => 1,
        }
    }
}
