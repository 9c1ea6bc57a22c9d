//! Meta adversarial training (MAT) against universal adversarial patches and
//! universal L-infinity perturbations, plus the attack suite used to measure
//! robustness.

pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod hash;
mod io;
pub mod meta;
pub mod model;
pub mod perturbation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
