//! Monte Carlo time discretization of decoupled forward-backward doubly
//! stochastic differential equations.
//!
//! The forward component is simulated with the Euler scheme, the backward
//! pair `(Y, Z)` with an implicit backward scheme whose conditional
//! expectations are estimated by regression on the forward state or by a
//! nested simulation oracle. All numerical code is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analytics;
pub mod backward;
pub mod condexp;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod linalg;
pub mod paths;
pub mod problem;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Problem = problem::FbdsdeProblem<f64>;
pub type Coefficients = problem::CoefficientSet<f64>;
pub type Grid = problem::TimeGrid<f64>;
pub type Bundle = paths::PathBundle<f64>;
pub type Paths = forward::ForwardPaths<f64>;
pub type Basis = condexp::BasisSpec<f64>;
pub type Fit = condexp::CondExpFit<f64>;
pub type Scheme = backward::SchemeOutput<f64>;
pub type Variational = backward::VariationalOutput<f64>;
pub type Options = backward::SchemeOptions<f64>;
pub type Solution = analytics::BenchmarkSolution<f64>;

pub type Problem32 = problem::FbdsdeProblem<f32>;
pub type Bundle32 = paths::PathBundle<f32>;
pub type Scheme32 = backward::SchemeOutput<f32>;
