//! Two-stage internal–external representation learning for underwater image
//! enhancement, together with the synthetic degradation model used to
//! generate ground truth, the evaluation metrics and a command-line driver.

pub mod cli;
pub mod config;
pub mod diff;
pub mod drfg;
pub mod error;
pub mod imaging;
pub mod interact;
pub mod io;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod regionseg;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
