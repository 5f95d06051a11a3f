//! Denoiser adapters: the frozen noise predictor that guidance differentiates
//! through.
//!
//! An adapter encodes prompts, predicts noise while exposing cross-attention
//! logits, and pulls gradients on those logits back to the latent. The
//! built-in [`ToyDenoiser`] runs in-process; [`WorkerDenoiser`] talks to an
//! external process hosting a pretrained model.

mod decode;
mod schedule;
mod toy;
mod worker;

use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{CrossAttentionRecord, TokenAlignment};
use crate::error::{Error, Result};

pub use decode::{latent_to_rgb, score_map_image};
pub use schedule::{ddim_step, NoiseSchedule};
pub use toy::{embed_tokens, toy_subtokens, ToyDenoiser, ToyDenoiserConfig};
pub use worker::{serve_worker, WorkerDenoiser, WORKER_ENV};

/// Latent tensor laid out as `[channels, height, width]`.
pub type Latent = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Text-encoder output for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoding {
    /// Prompt words, empty for the unconditional encoding.
    pub words: Vec<String>,
    /// Encoder columns of each word; start token and padding excluded.
    pub alignment: TokenAlignment,
    /// One row per encoder token, start token first.
    pub embeddings: Array2<f64>,
}

/// Attention probabilities captured during a forward pass, used for
/// prompt-to-prompt style editing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionStore {
    /// Per cross-attention layer, `[spatial × encoder tokens]`.
    pub cross: Vec<Array2<f64>>,
    /// Per self-attention layer, `[spatial × spatial]`.
    pub self_attn: Vec<Array2<f64>>,
}

/// Replacement of cross-attention columns by those of a source pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossInjection {
    /// Source cross-attention probabilities, one per layer.
    pub source: Vec<Array2<f64>>,
    /// `(target column, source column)` pairs to copy.
    pub mapping: Vec<(usize, usize)>,
    /// `(target column, factor)` applied after copying.
    pub reweight: Vec<(usize, f64)>,
}

/// Attention overrides applied inside one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionInjection {
    pub cross: Option<CrossInjection>,
    pub self_attn: Option<Vec<Array2<f64>>>,
}

impl AttentionInjection {
    pub fn is_empty(&self) -> bool {
        self.cross.is_none() && self.self_attn.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Noise prediction with the latent's shape.
    pub noise: Latent,
    /// Cross-attention logits, one record per layer and head.
    pub records: Vec<CrossAttentionRecord>,
    pub store: AttentionStore,
}

/// A frozen noise predictor exposing differentiable cross-attention.
///
/// Implementations must be deterministic and safe to share across threads;
/// per-generation state lives with the caller.
pub trait DenoiserAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> LatentShape;
    fn schedule(&self) -> &NoiseSchedule;
    fn encode_prompt(&self, words: &[String]) -> Result<PromptEncoding>;
    fn encode_unconditional(&self) -> Result<PromptEncoding>;
    fn forward(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        injection: Option<&AttentionInjection>,
    ) -> Result<ForwardOutput>;
    /// Gradient with respect to `z` of `Σ_i ⟨record_grads[i], records[i].logits⟩`,
    /// with records in the order returned by [`forward`](Self::forward).
    fn attention_vjp(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        record_grads: &[Array2<f64>],
    ) -> Result<Latent>;
    fn decode(&self, z: &Latent) -> Result<RgbImage>;
    /// Whether [`forward`](Self::forward) honors attention injection and fills
    /// the attention store.
    fn supports_injection(&self) -> bool {
        true
    }
}

pub(crate) fn check_latent(shape: LatentShape, z: &Latent) -> Result<()> {
    if z.dim() != shape.dims() {
        return Err(Error::input(format!(
            "latent has shape {:?}, expected {:?}",
            z.dim(),
            shape.dims()
        )));
    }
    Ok(())
}

/// Resolves an adapter by name.
///
/// `toy` is always available. `real` connects to the worker command named by
/// the [`WORKER_ENV`] environment variable.
pub fn resolve_adapter(name: &str, seed: u64) -> Result<Arc<dyn DenoiserAdapter>> {
    match name {
        "toy" => Ok(Arc::new(ToyDenoiser::new(ToyDenoiserConfig {
            seed,
            ..Default::default()
        }))),
        "real" => match std::env::var(WORKER_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Ok(Arc::new(WorkerDenoiser::spawn(&cmd)?)),
            _ => Err(Error::config(format!(
                "the real adapter needs a model worker; set {} to a command speaking the worker protocol \
                 (see README), or use --adapter toy",
                WORKER_ENV
            ))),
        },
        other => Err(Error::config(format!(
            "unknown denoiser adapter '{}'; available: real, toy",
            other
        ))),
    }
}
