//! Learning energy-efficient eigenmodes of a double pendulum with a neural control
//! potential, and stabilizing them with passivity-aware feedback.
//!
//! The pipeline:
//!
//! 1. [`dynamics`]: closed-form Hamiltonian mechanics of the double pendulum.
//! 2. [`potential`]: the learnable potential `V_θ` and its analytic derivatives.
//! 3. [`integrator`]: RK4 rollouts and exact backpropagation through them.
//! 4. [`objectives`]: task and eigenmode losses, eigenmode certification.
//! 5. [`trainer`]: Adam training loop and parameter sweeps.
//! 6. [`stabilizer`]: energy and mode feedback, closed-loop simulation, cycle multipliers.
//! 7. [`expcli`]: run configuration and the `modectl` commands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod expcli;
pub mod integrator;
pub mod objectives;
pub mod potential;
pub mod stabilizer;
pub mod trainer;

pub use dynamics::{PendulumParams, State};
pub use error::{Error, Result};
pub use integrator::{TimeGrid, Trajectory};
pub use objectives::{LossWeights, TaskSpec};
pub use potential::PotentialNet;
