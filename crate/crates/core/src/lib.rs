//! Multilevel Picard (MLP) approximation of iterated nested expectations.
//!
//! * [`rand_streams`]: deterministic random streams keyed by multi-indices.
//! * [`model`]: problem definitions and the exponential-Euler family.
//! * [`mlp_engine`]: the MLP estimators with exact cost accounting.
//! * [`oracles`]: closed-form, quadrature and nested Monte Carlo references.
//! * [`analysis`]: error and cost bounds, level selection, experiments.
//! * [`cli`]: configuration files, subcommands and CSV output.

#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod mlp_engine;
pub mod model;
pub mod oracles;
pub mod rand_streams;

pub use error::{DomainError, MlpError};
pub use mlp_engine::{cost_predict, mlp_exp_euler, mlp_general, simulate_x, Estimate, MlpParams};
pub use model::{IndexDistribution, ProblemSpec, TimeGrid};
pub use rand_streams::{derive_stream, Channel, CostLedger, MultiIndex, StreamKey};
