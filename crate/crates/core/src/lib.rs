//! Distortion-susceptibility analysis and selective filter fine-tuning for
//! small convolutional networks.
//!
//! The pipeline:
//!
//! 1. train a baseline CNN on clean images ([`zoo`]),
//! 2. distort images with additive noise or blur ([`distortion`]),
//! 3. measure how much each convolutional filter's activation map moves
//!    between clean and distorted inputs and rank filters by Borda count
//!    ([`susceptibility`]), or by comparing dataset medoids when clean and
//!    distorted images are not paired ([`exemplar`]),
//! 4. fine-tune only the most susceptible filters through per-channel
//!    gradient masks and measure the recovered accuracy ([`finetune`]).
//!
//! The network engine is generic over [`Scalar`]; experiments run in `f32`
//! and gradient checks in `f64`.

pub mod config;
pub mod data;
pub mod distortion;
pub mod error;
pub mod exemplar;
pub mod experiment;
pub mod finetune;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod susceptibility;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor used for experiments.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Param32 = nn::Param<f32>;
pub type Param64 = nn::Param<f64>;
