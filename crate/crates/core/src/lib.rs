//! Continuous-to-discrete latent tokenization.
//!
//! A frozen continuous autoencoder's latents are discretized by residual
//! vector quantization or residual attention-based quantization, trained
//! with straight-through gradients, and optionally adapted with low-rank
//! adapters. A small masked-token generator models the resulting code grids.

pub mod cli;
pub mod codebook;
pub mod error;
pub mod losses;
pub mod maskgit;
pub mod metrics;
pub mod numkit;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod quantize;
pub mod vae;

pub use error::{Error, Result};
