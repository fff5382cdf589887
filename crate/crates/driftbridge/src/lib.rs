//! Trajectory inference between population snapshots under a non-zero
//! reference drift.
//!
//! Given empirical marginals `ρ0, ρ1, …` and (possibly approximate) velocity
//! observations, this crate learns a stochastic bridge whose drift follows the
//! reference motion — rotation, vortices, cycles — instead of defaulting to the
//! straight, energy-minimizing paths of plain flow matching. Training is
//! simulation-free and runs in two stages:
//!
//! 1. [`interpolant`] — fit an endpoint-pinned neural path
//!    `μ_t = t·x1 + (1−t)·x0 + t(1−t)·φ(x0, x1, t)` by regressing its velocity
//!    onto the reference drift.
//! 2. [`matcher`] — pair minibatch endpoints by the kinetic-energy transport
//!    cost of those paths ([`coupling`]), then regress a drift network (and,
//!    when `σ > 0`, a score network) onto the detached interpolant velocity.
//!
//! [`simulate`] integrates the trained drift as an ODE or SDE, [`metrics`]
//! scores the result against held-out marginals and the reference field, and
//! [`experiment`] wires everything into reproducible end-to-end runs driven by
//! the `driftbridge` CLI.
//!
//! The numerical substrate — dense matrices, small MLPs, forward-mode time
//! derivatives, reverse-mode gradients, Adam — is self-contained in [`numkit`];
//! everything is `f64` and bit-reproducible for a fixed seed.

pub mod coupling;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod interpolant;
pub mod matcher;
pub mod metrics;
pub mod numkit;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
