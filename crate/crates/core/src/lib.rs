//! Unsupervised deep metric learning with self-supervision.
//!
//! Learns an embedding without labels by alternating three ingredients:
//! k-means cluster assignments used as pseudo-labels, hard-pair mining with
//! the multi-similarity loss over those pseudo-labels, and an auxiliary
//! four-way image-rotation prediction head that regularizes the shared
//! backbone. Everything runs on a small reverse-mode autodiff tape written
//! for this crate, generic over `f32` (training) and `f64` (verification).

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod seeds;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
