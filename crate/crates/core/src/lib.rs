//! Simulated tactile peg-in-hole insertion, end to end:
//!
//! * [`sim`] — quasi-static contact model of a cylindrical peg over a plate
//!   with a single hole; commanded motion is projected onto the feasible set
//!   and the blocked remainder becomes a spring reaction force.
//! * [`tactile`] — synthetic gel-pad sensor: contact forces are rendered to a
//!   64x64 heightmap, smoothed, and shaded into an RGB frame through a
//!   calibrated polynomial lighting model.
//! * [`env`] — episodic insertion task with partial observability (a constant
//!   per-episode offset corrupts the reported gripper position) and a shaped
//!   reward dominated by a terminal insertion bonus.
//! * [`autodiff`] — minimal reverse-mode automatic differentiation over dense
//!   tensors; just enough operations for the networks used here.
//! * [`worldmodel`] — recurrent state-space model (deterministic GRU path plus
//!   grouped categorical latents) trained to reconstruct observations and
//!   predict reward and episode continuation.
//! * [`agent`] — actor-critic trained entirely on imagined rollouts of the
//!   world model.
//! * [`trainer`] — replay buffer, training loop, evaluation, metrics, and
//!   checkpointing.
//! * [`oracle`] — scripted spiral-search controller used as a solvability
//!   baseline and for calibration of expectations.
//!
//! Numeric core code is generic over the scalar type via [`num::Real`]
//! (implemented for `f32` and `f64`); the concrete choices used by the
//! pipeline are fixed by the aliases below.

pub mod agent;
pub mod autodiff;
pub mod env;
pub mod num;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod tactile;
pub mod trainer;
pub mod twohot;
pub mod worldmodel;

/// Scalar used by the neural substrate. Training runs entirely in `f32`;
/// tests instantiate the same generic code at `f64` where finite-difference
/// tolerances demand it.
pub type NetFloat = f32;

/// Scalar used by the contact simulator, environment, and reward math.
pub type SimFloat = f64;

/// Dense tensor as used by the training path.
pub type Tensor = autodiff::Tensor<NetFloat>;

/// Recording graph as used by the training path.
pub type Graph = autodiff::Graph<NetFloat>;

/// Position / force / action triple in simulator units (metres, newtons).
pub type Vec3 = [SimFloat; 3];
