//! Self-adjusting fusion representation learning for sentiment regression
//! over unaligned text and audio feature sequences.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Training
//! uses [`Model32`]; gradient verification re-instantiates a [`Model64`].

pub mod align;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod xadjust;

pub use error::{Error, Result};
pub use model::{Checkpoint, Model, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
