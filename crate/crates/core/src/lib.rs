//! Post-training quantization for selective state-space models.

pub mod archive;
pub mod calibrate;
pub mod error;
pub mod hadamard;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod reorder;
pub mod rng;
pub mod search;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
