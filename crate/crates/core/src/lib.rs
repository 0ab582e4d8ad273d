pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod distillation;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
