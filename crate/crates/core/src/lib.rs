//! Cooperative motion planning along fixed paths.
//!
//! Agents plan longitudinal, piecewise-constant-jerk trajectories along
//! pre-computed paths. A sampled search over trajectory ensembles
//! approximates the joint optimum of a multi-agent cost functional; the
//! ego keeps a trust estimate in that joint plan and falls back to a
//! defensive maneuver when the plan looks unreliable. An analytic
//! RSS-style monitor backs everything up at 100 Hz.
//!
//! The [`sim`] module closes the loop with a deterministic simulator and
//! ships the narrowing and intersection scenarios.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costs;
pub mod error;
pub mod geometry;
pub(crate) mod par;
pub mod planner;
pub mod safety;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};

/// Identifier of a traffic participant.
pub type AgentId = String;
