//! Deformable prototypical part networks with hand-derived gradients.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod deform;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod sphere;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor4;
