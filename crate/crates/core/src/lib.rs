pub mod autograd;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod render;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
