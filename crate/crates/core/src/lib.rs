//! Adversarial margin maximization.
//!
//! Trains classifiers with a regularizer built from the norm of DeepFool
//! perturbations, differentiated through the attack itself.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod io;
pub mod model;
pub mod attack;
pub mod regularizer;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod experiment;
