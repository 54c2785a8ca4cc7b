//! Simulation and analysis of click-counting experiments with a
//! symmetry-reduced matrix-of-moments nonclassicality witness.

pub mod analysis;
pub mod click_counting;
pub mod error;
pub mod ideal_theory;
pub mod math;
pub mod moments_witness;
pub mod simulator;
pub mod timetag;

pub use error::{Error, Result};
