//! Spatio-temporal graph convolutional networks on a small reverse-mode
//! autodiff core.
//!
//! The crate covers Chebyshev and first-order spectral graph convolutions,
//! gated temporal convolutions and LSTM temporal blocks, five stacked
//! architectures built from them, rolling-window datasets, and a training
//! and benchmarking harness.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod models;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use graph::{LambdaMax, SpectralOperators, WeightedGraph};
pub use tensor::Tensor;
