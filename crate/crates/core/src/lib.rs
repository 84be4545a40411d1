//! Channel-aware inverted-residual CNN for retinal image grading.
//!
//! The crate bundles a small reverse-mode autodiff engine, the network
//! building blocks (inverted linear residual blocks with squeeze-and-excitation
//! and spatial dropout), augmentation recipes, Adam-family optimizers with
//! AdamP projection, grading metrics, dataset plumbing and the training
//! harness used by the `nnmobile` CLI.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod img;
pub mod metrics;
pub mod layers;
pub mod model;
pub mod optim;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod study;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
