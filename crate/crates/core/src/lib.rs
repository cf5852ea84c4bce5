//! Stethoscope probes on intermediate representations, with a block-tower
//! stability lab and MNIST hint experiments built on a small autodiff engine.

pub mod autodiff;
mod error;
pub mod exp;
pub mod mnist;
pub mod nn;
pub mod optim;
pub mod stethoscope;
pub mod towers;

pub use error::{Error, Result};
