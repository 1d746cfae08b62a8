//! Sampling-based model predictive control for a differential-drive robot
//! moving among pedestrians.
//!
//! Three controllers share one rollout engine:
//!
//! * `mppi` samples control perturbations, rolls out the unicycle model and
//!   averages the perturbations with softmax weights of the rollout costs.
//! * `umppi` replaces every rollout by a batch of seven sigma-point
//!   trajectories that carry the state covariance along the horizon and
//!   scores them with a risk-sensitive goal cost.
//! * `c2umppi` is `umppi` whose pedestrian cost is a binary penalty derived
//!   from a Gaussian collision chance constraint.
//!
//! Pedestrians are tracked with a constant-velocity Kalman filter and their
//! predictions are resampled onto the controller time grid
//! ([`prediction::LayeredObstacles`]); static geometry enters through a
//! robot-centred occupancy grid ([`world::Costmap`]).
//!
//! Rollouts are evaluated in parallel when the `parallel` feature is on
//! (the default). Every rollout draws from its own random stream derived
//! from the master seed, so results do not depend on the worker count.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod chance;
pub mod controller;
pub mod costs;
pub mod dynamics;
mod error;
pub mod metrics;
pub mod prediction;
pub mod runner;
pub mod scenario;
pub mod unscented;
pub mod world;

pub use error::{Error, Result};
