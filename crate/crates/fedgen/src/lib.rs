//! One-shot federated learning simulator with diffusion-model clients.
//!
//! Clients train class-conditioned denoising diffusion models on Dirichlet-skewed
//! shards of an image classification dataset, optionally under DP-SGD with RDP
//! accounting. Each client uploads its model exactly once. The server generates a
//! synthetic dataset from the collected models, optionally filters it by Fourier
//! magnitude statistics, trains a global classifier, and audits memorization with
//! a nearest-neighbor distance metric.

pub mod audit;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod federation;
pub mod harness;
pub mod models;
pub mod privacy;
pub mod quality;

pub use error::{Error, Result};
