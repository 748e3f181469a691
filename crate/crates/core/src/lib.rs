//! Multitask Gaussian processes whose outputs satisfy linear and nonlinear sum constraints.
//!
//! Linear constraints `F f = S` are imposed by conditioning the multitask prior; nonlinear
//! constraints of the form `Σ a_i h_i(f_i) = S` are reduced to linear ones by learning the
//! transformed outputs `f' = h(f)` with a change-of-variables likelihood.

pub mod bench;
pub mod constraint;
pub mod data;
pub mod datasets;
pub mod error;
pub mod figure;
pub mod gaussian;
pub mod inference;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod pose;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
