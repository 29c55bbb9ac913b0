//! Variational calibration of computer models with random-feature Gaussian
//! process emulators.

pub mod bench;
pub mod cli;
pub mod error;
pub mod grad;
pub mod model;
mod objective;
pub mod rff;
pub mod svi;
pub mod trainer;

pub use error::{Error, Result};
