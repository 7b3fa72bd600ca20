pub mod data;
pub mod error;
pub mod experiment;
pub mod hypersphere;
pub mod lipschitz;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod scores;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor2;
