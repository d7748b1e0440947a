//! Model-based inexact stochastic preconditioned proximal point method.
//!
//! The crate is organised bottom-up:
//!
//! - [`metric`]: preconditioners `M = I + c·BᵀB` (and identity/diagonal), their
//!   norms and equivalence constants.
//! - [`prox`]: regularizers with closed-form proximal maps, Moreau envelopes and
//!   a certified reference proximal solver for smooth + separable composites.
//! - [`model`]: stochastic model functions (subgradient, prox-linear, proximal
//!   point) and minibatch aggregation.
//! - [`subproblem`]: the per-iteration strongly convex subproblem, its dual,
//!   and the three inexactness certificates.
//! - [`solver`]: the outer stochastic loop with stepsize/accuracy schedules.
//! - [`diagnostics`]: stationarity measures and log-log rate fitting.

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod metric;
pub mod model;
pub mod prox;
pub mod solver;
pub mod subproblem;

pub use error::{Error, Result};
pub use metric::{Metric, MetricSchedule};
pub use model::{DataMatrix, LossFamily, MinibatchModel, ModelFunction, ModelKind};
pub use prox::{Composite, Regularizer, SmoothFn};
pub use solver::{IterateTrace, Problem, Schedule};
pub use subproblem::{Criterion, ScalarPiece, SubproblemCertificate, SubproblemInstance};


/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
