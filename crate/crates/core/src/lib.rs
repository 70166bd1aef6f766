//! Separation of crosstalk-contaminated image pairs with a modified double
//! deep image prior, built on a small reverse-mode autodiff engine.

pub mod analysis;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
