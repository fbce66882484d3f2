//! Hamiltonian variational autoencoder for joint image and segmentation-mask
//! synthesis, with the pieces needed to measure how much the synthetic pairs
//! help a small U-Net segmenter.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod elbo;
pub mod error;
pub mod experiment;
pub mod hmc;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
