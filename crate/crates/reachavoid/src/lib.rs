//! Layered reach-avoid control for linear stochastic systems.
//!
//! The library builds a two-level control architecture. The inner level is a
//! reference-tracking model predictive controller that enforces hard state and
//! input constraints in continuous time via constraint tightening. The outer
//! level abstracts the MPC-controlled closed loop as a finite Markov decision
//! process over a hypercube grid and runs a robust value iteration whose
//! optimal value is a certified lower bound on the probability of reaching a
//! target set while avoiding unsafe regions.
//!
//! Module map:
//! - [`geometry`]: polytopes, balls, boxes, region algebra, Pontryagin erosion
//! - [`lti`]: structured linear systems, exact discretization, fine simulation
//! - [`tightening`]: growth bounds, tube radii, tightened constraint families
//! - [`qp`]: dense operator-splitting quadratic-program solver
//! - [`mpc`]: MPC/robust-MPC transcription and receding-horizon execution
//! - [`grid`]: hypercube abstraction of the stochastic subspace
//! - [`kernel`]: Monte-Carlo transition-kernel estimation
//! - [`dp`]: plain, robust and Lagrangian value iteration
//! - [`scenario`], [`pipeline`]: end-to-end orchestration and reports

pub mod dp;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod kernel;
pub mod lti;
pub mod matexp;
pub mod mpc;
pub mod oracles;
pub mod persist;
pub mod pipeline;
pub mod qp;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod tightening;

pub use error::Error;

/// Software version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
