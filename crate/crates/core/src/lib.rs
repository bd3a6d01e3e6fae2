//! Decoder-only view synthesis on a small, fully differentiable CPU substrate.

pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod model;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
