//! Scarce-data MLOps toolkit: a from-scratch tensor/autodiff core, an
//! autoencoder that fingerprints image datasets into a small latent space,
//! dataset and model registries, strategy ranking, AutoML execution and
//! drift-monitored serving.

pub mod automl;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod models;
pub mod monitor;
pub mod nn;
pub mod npy;
pub mod rng;
pub mod scalar;
pub mod strategy;
pub mod synthetic;
pub mod task_model;
pub mod tensor;
pub mod workspace;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
