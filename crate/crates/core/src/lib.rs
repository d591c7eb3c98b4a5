pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
