//! Stochastic parabolic systems with dynamic boundary conditions on bulk–surface domains:
//! discretization, forward and backward tree solvers, penalized null controls and
//! empirical checks of weighted (Carleman) and observability estimates.

pub mod backward;
pub mod cli;
pub mod coefficients;
pub mod control;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod linalg;
pub mod noise;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
