//! Coordinated transmission/distribution market simulation with IoT
//! load-altering attacks and breaker cascades.

pub mod attacker;
pub mod cascade;
pub mod conic;
pub mod distribution;
pub mod error;
pub mod grid;
pub mod market;
pub mod scenario;
pub mod transmission;

pub use error::{CaseError, KernelError, ModelError};
