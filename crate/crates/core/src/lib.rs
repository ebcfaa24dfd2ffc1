//! Hammerstein-Wiener modeling of per-second subjective video quality:
//! forward simulation, outage-penalized training with recursive gradients,
//! model-order selection, stability diagnostics, subjective-score
//! preprocessing and synthetic ground-truth generation.

pub mod analysis;
pub mod dataprep;
pub mod error;
pub mod eval;
pub mod ident;
pub mod model;
pub mod order;
pub mod synth;

pub use error::{Error, Result};
