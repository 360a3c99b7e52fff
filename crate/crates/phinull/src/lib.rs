//! Discrete operator calculus, Carleman weights, penalized HUM control on a
//! binomial scenario tree, the semilinear fixed-point loop and numerical
//! checks of the associated Carleman inequalities.

pub mod bsde_adjoint;
pub mod carleman_lab;
pub mod cli;
pub mod error;
pub mod fixedpoint;
pub mod forward_solver;
pub mod hum_control;
pub mod mesh;
pub mod scenario;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
