//! Pose-conditioned multi-view multimodal localization on a synthetic
//! desk-scale sensor benchmark.
//!
//! A set of fixed sensor nodes (camera-like, depth-like and radar-like
//! modalities) observes a single moving target. Models fuse per-node,
//! per-modality features with a transformer encoder and regress the
//! target's world (x, y). Node poses are injected through conditional
//! layers (pose-generated 1D convolutions, conditional layer
//! normalization), which is what lets a trained model generalize to
//! sensor arrangements never seen during training.
//!
//! Crate layout:
//! - [`geometry`]: quaternions, rigid transforms, the 7-value pose encoding
//! - [`synthworld`]: synthetic dataset generation (trajectories, rendering, manifests)
//! - [`autodiff`]: reverse-mode tape over `f64` ndarrays
//! - [`nn`]: parameter store and standard layers (linear, conv, norm, attention)
//! - [`condlayers`]: pose-conditioned layers and comparison conditioning methods
//! - [`model`]: backbone/adapter/fusion assembly into trainable variants
//! - [`latefusion`]: per-node local regressors + Kalman-filter baseline
//! - [`training`]: optimizer, sensor dropout, pretraining, train loop
//! - [`evaluation`]: error statistics, CDFs, SSIM split validation, overhead accounting
//! - [`config`]: experiment configuration files driving the CLI

pub mod autodiff;
pub mod condlayers;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod latefusion;
pub mod model;
pub mod nn;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
