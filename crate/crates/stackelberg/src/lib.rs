//! Robust Stackelberg equilibria of zero-sum stochastic linear-quadratic
//! leader-follower games with indefinite weights.
//!
//! The pipeline solves the follower Riccati equation, builds the augmented
//! block systems, solves the leader's generalized Riccati and offset
//! equations, and reads off the feedback strategies of both players and the
//! worst-case disturbances. Monte Carlo tools check the result.

// Guards are written `!(x > t)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod backward;
pub mod equilibrium;
pub mod error;
mod linalg;
pub mod model;
pub mod montecarlo;
pub mod par;

pub use error::{Error, Result};
pub use model::{
    make_grid, sample, validate_spec, ConstantGame, GameSpec, Mat, MatrixPath, TimeGrid, Vector,
};
pub use par::Execution;
