//! Entropy-driven adaptive learning rates for federated learning, solved as a
//! mean-field game between clients.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod meanfield;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{ParamVector, RngStream};
