pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod generation;
pub mod latent;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod oracles;
pub mod report;
pub mod representation;
pub mod surrogate;

pub use error::{Error, Result};
