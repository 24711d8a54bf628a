//! Local differential privacy for text rewriting in the latent space of a small
//! sequence-to-sequence autoencoder.
//!
//! Documents are encoded to a fixed-size latent, optionally pruned, clipped
//! and noised with a calibrated Laplace or Gaussian mechanism, then decoded
//! back to text.

pub mod clipping;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod mechanisms;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
