//! Memory-efficient two-stage 3D GAN with a CRF embedding critic: tensor
//! autodiff, networks, training, data preparation and evaluation metrics.

pub mod data;
pub mod metrics;
pub mod models;
pub mod training;
pub mod tensor;

pub use models::{ModelBundle, ModelConfig, Network, ParameterCounts, Variant};
pub use tensor::{Precision, Scalar, Tensor, TensorError};
