//! Trainable attention explanations for frozen black-box image classifiers.

pub mod attention;
pub mod autograd;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model_zoo;
pub mod nn;
pub mod pipeline;
pub mod sanity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
