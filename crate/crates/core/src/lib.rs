//! Hybrid quantum-classical attention agents for vehicle routing with tensor demand.

pub mod autodiff;
pub mod env;
pub mod error;
pub mod orchestrator;
pub mod policy;
pub mod qonn;
pub mod qsampler;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
