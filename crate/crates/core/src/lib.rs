//! Mean-field stochastic linear-quadratic control by ε-perturbation.
//!
//! The crate solves the perturbed Riccati pair for a decreasing sequence of
//! ε, builds the closed-loop strategies they induce, simulates the closed-loop
//! mean-field SDE by Euler–Maruyama on shared noise, and extracts the limit
//! control and weak closed-loop gains.

pub mod cost;
pub mod error;
pub mod feedback;
pub mod matcore;
pub mod pipeline;
pub mod problem;
pub mod riccati;
pub mod simulate;
mod streams;

pub use error::{Error, Result};
pub use matcore::{Matrix, Vector};
pub use problem::{CoefficientFn, InitialLaw, ProblemSpec, TimeGrid};
