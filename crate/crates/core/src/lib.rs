//! Input-to-state stable CTRNN neural ODEs for circuit behavioral modeling.

pub mod aging;
pub mod cli;
pub mod cosim;
pub mod data;
pub mod equilibrium;
pub mod error;
pub mod exporter;
pub mod model;
pub mod numerics;
pub mod solver;
pub mod stability;
pub mod training;

pub use error::{Error, Result};
