//! Hamilton-Jacobi reachability for planar obstacle avoidance, approximated
//! by a physics-informed two-headed network and compared against a
//! classical grid solver.

pub mod error;
pub mod geometry;
pub mod gridhjr;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod neuralnet;
pub mod trainer;
pub mod simulator;
pub mod config;
pub mod experiment;
