//! Synthesis of disturbance feedback policies for uncertain systems under
//! bounded LTL specifications.
//!
//! The pipeline compiles a bounded LTL formula over uncertainty-dependent
//! polyhedral atomic propositions, together with affine parameter-varying
//! dynamics and a feedback-policy parameterization, into mixed-integer
//! linear programs. Two synthesis routes are provided:
//!
//! * a scenario route, which instantiates the specification constraints at
//!   sampled disturbance realizations and sizes the sample set so that the
//!   resulting policy carries a-priori probabilistic satisfaction guarantees,
//! * a robust route for problems that depend linearly on the uncertainty,
//!   which estimates the disturbance support from samples and dualizes the
//!   robust constraints over polyhedral pieces.
//!
//! A reference branch-and-bound MILP solver over a bounded-variable simplex
//! core is included so the toolkit runs without external dependencies; a
//! narrow backend boundary allows swapping in an external solver.

pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod logic;
pub mod milp;
pub mod policy;
pub mod robust_linear;
pub mod scenario;
pub mod studies;

pub use error::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
