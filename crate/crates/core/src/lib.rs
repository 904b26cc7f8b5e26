//! Latent-space image blending on a flag-structured diffusion manifold.
//!
//! Token features from two or more images are joined into one affinity
//! graph, its diffusion eigenvectors define a nested family of subspaces, and
//! a small encoder/decoder pair is trained so that a low-dimensional latent
//! preserves that structure. Blends are straight lines in the latent space.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blending;
pub mod correspondence;
pub mod error;
pub mod feature_io;
pub mod flag;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod model_file;
pub mod spectral;
pub mod synthetic;

pub use error::{Result, VibeError};
