//! Deterministic federated-learning simulator built around a fixed
//! orthonormal classifier, unit-hypersphere feature normalization, and a
//! closed-form post-training classifier calibration.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use cli::cli_main;
pub use error::{Error, Result};
