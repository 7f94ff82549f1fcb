//! Channel-level neural architecture search for tiny pose-estimation CNNs,
//! with an int8 deployment path, a memory-hierarchy cost model and a
//! closed-loop tracking simulator.

pub mod artifact;
pub mod cli;
pub mod deploy;
pub mod error;
pub mod metrics;
pub mod nas;
pub mod quant;
pub mod sim;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
