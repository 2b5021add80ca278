//! Embodiment-conditioned motion retargeting.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod physics;
pub mod rng;
pub mod so3;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
