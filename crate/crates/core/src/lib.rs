pub mod autograd;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tasks;
pub mod training;
pub mod trajectory;
pub mod tensor;

pub use error::{Error, Result};
