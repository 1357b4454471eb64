//! Greedy zero-order training of bias-free convolutional networks.
//!
//! The numerical core ([`tensor`], [`network`], [`gradient`], [`trainer`]) is
//! generic over [`Scalar`]; the aliases below fix it to `f64`, which is what
//! training, gradient verification and the experiment runner use.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradient;
pub mod network;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor4<f64>;
pub type Kernels = tensor::KernelBank<f64>;
pub type Logits = tensor::Logits<f64>;
pub type Network = network::NetworkModel<f64>;
pub type Dataset = data::LabeledDataset<f64>;
pub type Gradients = gradient::GradientSet<f64>;
pub type Cache = gradient::ForwardCache<f64>;

pub type Tensor32 = tensor::Tensor4<f32>;
pub type Network32 = network::NetworkModel<f32>;
