//! Variational Bayes DeepONet: Gaussian random field inputs, reference
//! solvers, triplet datasets, and a Bayes-by-backprop operator network with
//! heteroscedastic output noise.

pub mod checkpoint;
pub mod dataset;
pub mod deeponet;
pub mod error;
pub mod grf;
pub mod io;
pub mod nn;
pub mod predictor;
pub mod problems;
pub mod rng;
pub mod solvers;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
