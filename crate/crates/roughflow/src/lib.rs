//! Level-2 rough paths and rough differential equations, with flows on
//! foliated suspension spaces.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor_algebra`]: grid-indexed level-2 rough paths (increments, the
//!   Chen identity, shuffle checks, Hölder norms, distances, time reversal,
//!   dilation, time shift).
//! - [`rough_lift`]: piecewise-linear drivers and their canonical lifts,
//!   dyadic Brownian samples, Cameron–Martin paths, CSV interchange.
//! - [`rde_solver`]: the second-order (Davie) one-step scheme, trajectory
//!   solving with refinement, first/second-order Jacobian flows, inverse
//!   flow via time reversal, and the order-(3α) remainder diagnostic.
//! - [`foliated`]: suspension spaces over exact transversals (circle
//!   rotation, Cantor odometer, finite permutation), leafwise solving with
//!   chart transitions, leaf-preservation checks, flow and Jacobian grids.
//! - [`harness`]: reproducible experiments (Wong–Zakai tables, support
//!   skeletons, small-noise concentration), flat-file configs, CSV/JSON
//!   emission, and the `roughflow` CLI.

// Negated comparisons such as `!(err <= tol)` are NaN-robust guards (a NaN
// must take the failure branch), and explicit index loops mirror the tensor
// index notation of the stepping formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod foliated;
pub mod harness;
pub mod rde_solver;
pub mod rough_lift;
pub mod tensor_algebra;
