pub mod codec;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod dsp;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod repro;
pub mod rng;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
