pub mod adapter;
pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
