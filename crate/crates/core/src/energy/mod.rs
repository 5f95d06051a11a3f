//! Attention energies, the object-conditioned binding loss and the intensity
//! regularizer.

mod ebm;
mod function;
mod hyper;
mod kernel;
mod loss;

use std::sync::Arc;

pub use ebm::{conditional_distribution, exact_loglik_grad, log_likelihood, DifferentiableFeatures, ToyFeatureMap};
pub use function::{Cosine, EnergyFunction, EnergyGrad, NegAvgKl, KL_FLOOR};
pub use hyper::{Ablations, GuidanceHyperparams, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_UPDATE_STEPS};
pub use kernel::GaussianKernel;
pub(crate) use kernel::square_side;
pub use loss::{
    binding_coefficients, binding_loss, binding_loss_from_energies, intensity_level, intensity_loss,
    intensity_loss_with, negatives, total_loss, LossBreakdown, LossGradients, ObjectCentricLoss,
};

use crate::registry::Registry;

/// Energy functions selectable by name.
pub fn energy_registry() -> Registry<dyn EnergyFunction> {
    let mut r: Registry<dyn EnergyFunction> = Registry::new("energy function");
    r.register("cosine", Arc::new(Cosine));
    r.register("kl", Arc::new(NegAvgKl));
    r.register("neg_avg_kl", Arc::new(NegAvgKl));
    r
}
