pub mod backbones;
pub mod bridge;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
