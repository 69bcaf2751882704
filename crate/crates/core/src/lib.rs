//! Siamese tracker for thermal-infrared-style grayscale video.
//!
//! The crate is a self-contained desk-scale stack: a dense tensor library
//! with reverse-mode autodiff, a small shared convolutional backbone, two
//! correlation-similarity heads (spatial structure on a shallow tap,
//! channel semantics on a deep tap) fused by a learned ensemble, a
//! synthetic sequence generator standing in for real data, SGD training,
//! the online tracking loop, and a supervised evaluation protocol.
//!
//! All numeric code is generic over [`Scalar`]: `f32` for runtime speed,
//! `f64` for verification (gradient checks, oracle comparisons,
//! reproducible training).

pub mod backbone;
pub mod conv;
pub mod error;
pub mod eval;
pub mod fft;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod resample;
pub mod sequence;
pub mod rng;
pub mod scalar;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod verify;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{SimilarityMap, Tensor};

/// Runtime-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Runtime-precision graph.
pub type Graph32 = graph::Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = graph::Graph<f64>;
