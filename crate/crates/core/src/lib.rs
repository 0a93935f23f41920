//! Multi-contrast MRI synthesis with 3-D attention GANs.

pub mod attention;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
