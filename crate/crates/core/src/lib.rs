//! Bayesian-optimization mining of fine-grained vision negatives for
//! contrastive path-instruction ranking, on a synthetic navigation world.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod forge;
pub mod ranking;
pub mod rng;
pub mod runner;
pub mod tpe;
pub mod world;

pub use error::{Error, Result};
