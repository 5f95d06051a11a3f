//! Object-conditioned energy-based attention map alignment.
//!
//! Inference-time latent guidance for text-to-image diffusion: prompts are
//! parsed into objects and their modifiers, cross-attention maps are
//! aggregated at 16×16, and the latent is nudged along the gradient of an
//! object-centric binding loss plus an intensity regularizer during the first
//! part of DDIM sampling.

pub mod attention;
pub mod config;
pub mod denoiser;
pub mod editing;
pub mod energy;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod prompt_graph;
pub mod registry;

pub use error::{Error, Result};
