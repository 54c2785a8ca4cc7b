//! Exact and extended-precision arithmetic shared by the estimators.

pub mod binomial;
pub mod fixed;

pub use binomial::{big_to_f64, binomial, binomial_row, ratio_to_f64, ClickWeights};
pub use fixed::Fixed;
