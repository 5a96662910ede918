//! Instrumental-variable corrections for reinforcement learning under
//! endogenous rewards, written as projected two-timescale stochastic approximation.
//!
//! * [`sa_core`]: step-size schedules, ball projection, generic SA step.
//! * [`environments`]: advertising and linear-quadratic simulators.
//! * [`algorithms`]: IV-SGD, IV-Q-Learning, IV-TD, IV-AC and their biased baselines.
//! * [`inference`]: long-run covariance, Lyapunov covariance, intervals and policy tests.
//! * [`oracles`]: closed forms used as ground truth.
//! * [`harness`]: seeded replication presets and CSV output.

pub mod algorithms;
pub mod environments;
pub mod error;
pub mod harness;
pub mod inference;
pub mod oracles;
pub mod sa_core;

pub use error::{Error, Result};
