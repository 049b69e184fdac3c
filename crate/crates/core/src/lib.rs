//! Deterministic simulator of data-parallel ML training under bounded update
//! staleness.
//!
//! Workers advance on a shared logical clock. Each iteration every worker
//! reads its own model cache, computes an update on a batch from its data
//! shard, and broadcasts the update to every cache (including its own)
//! through a transit queue that delays delivery by a sampled number of
//! iterations. Convergence is measured in batches processed, never in wall
//! clock time.
//!
//! The crate is generic over the parameter scalar via [`Scalar`] (`f32` or
//! `f64`); [`Real`] is the default precision used by the CLI.

pub mod coherence;
pub mod config;
pub mod delay;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod simcore;
pub mod workloads;

pub use param::{ParamDelta, ParamVector};
pub use scalar::Scalar;

/// Default scalar type for simulations driven by the CLI.
pub type Real = f64;
