//! Deterministic desk-scale simulator of federated parameter-efficient
//! fine-tuning on frozen transformer backbones.

pub mod autodiff;
pub mod cost;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
pub use params::{Param, ParamSet};
pub use tensor::Tensor;
