use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{energy_registry, EnergyFunction};
use crate::error::{Error, Result};

/// Loss-term switches used by the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Drop the repulsive (negative-sample) term of the binding loss.
    pub no_repulsion: bool,
    /// Replace each object/non-modifier energy by its average with the
    /// object/modifier energies, treating objects and modifiers alike.
    pub no_object_conditioning: bool,
    /// Drop the binding loss entirely, leaving only the intensity term.
    pub no_binding: bool,
}

/// Latent-update settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceHyperparams {
    /// Step size of `z ← z − α∇L`.
    pub alpha: f64,
    /// Intensity-regularizer weight.
    pub lambda: f64,
    /// Number of leading sampler steps that receive a latent update.
    pub update_steps: usize,
    /// Registered energy-function name (`cosine` or `kl`).
    pub energy: String,
    pub ablations: Ablations,
}

pub const DEFAULT_ALPHA: f64 = 20.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_UPDATE_STEPS: usize = 25;

impl Default for GuidanceHyperparams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            update_steps: DEFAULT_UPDATE_STEPS,
            energy: "cosine".to_string(),
            ablations: Ablations::default(),
        }
    }
}

impl GuidanceHyperparams {
    /// Update window covering the first half of `total_steps`, rounded up.
    pub fn half_window(total_steps: usize) -> usize {
        total_steps.div_ceil(2)
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::input(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::input(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.update_steps > total_steps {
            return Err(Error::input(format!(
                "update_steps ({}) exceeds total_steps ({})",
                self.update_steps, total_steps
            )));
        }
        self.energy_fn()?;
        Ok(())
    }

    pub fn energy_fn(&self) -> Result<Arc<dyn EnergyFunction>> {
        energy_registry().get(&self.energy)
    }
}
