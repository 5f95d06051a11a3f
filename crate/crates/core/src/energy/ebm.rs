//! Conditional token model `p(l | s) ∝ exp f(A_l, A_s)` over a candidate set
//! and its exact log-likelihood gradient.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EnergyFunction;
use crate::error::{Error, Result};

/// A differentiable map from a flat parameter vector to per-token features.
pub trait DifferentiableFeatures {
    fn dim(&self) -> usize;
    fn features(&self, z: &[f64]) -> Array2<f64>;
    /// Vector-Jacobian product of [`features`](Self::features) at `z`.
    fn pullback(&self, z: &[f64], grad_features: &Array2<f64>) -> Vec<f64>;
}

fn check_candidates(n: usize, s: usize, candidates: &[usize]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::input("candidate set is empty"));
    }
    if candidates.contains(&s) {
        return Err(Error::input(format!("conditioning token {} is in the candidate set", s)));
    }
    if s >= n || candidates.iter().any(|&l| l >= n) {
        return Err(Error::input(format!("token index out of range for {} tokens", n)));
    }
    Ok(())
}

/// `p(l | s)` for each `l` in `candidates`, in the same order.
pub fn conditional_distribution(
    features: &Array2<f64>,
    s: usize,
    candidates: &[usize],
    f: &dyn EnergyFunction,
) -> Result<Vec<f64>> {
    check_candidates(features.nrows(), s, candidates)?;
    let energies = candidates
        .iter()
        .map(|&l| f.energy(features.row(l), features.row(s)))
        .collect::<Result<Vec<_>>>()?;
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `log p(l | s)` as a function of the model parameters.
pub fn log_likelihood(
    model: &dyn DifferentiableFeatures,
    z: &[f64],
    s: usize,
    l: usize,
    candidates: &[usize],
    f: &dyn EnergyFunction,
) -> Result<f64> {
    let features = model.features(z);
    let pos = candidates
        .iter()
        .position(|&c| c == l)
        .ok_or_else(|| Error::input(format!("token {} is not a candidate", l)))?;
    let p = conditional_distribution(&features, s, candidates, f)?;
    Ok(p[pos].ln())
}

/// `∇_z log p(l | s) = ∇_z f(A_l, A_s) − E_{l'∼p}[∇_z f(A_l', A_s)]`.
pub fn exact_loglik_grad(
    model: &dyn DifferentiableFeatures,
    z: &[f64],
    s: usize,
    l: usize,
    candidates: &[usize],
    f: &dyn EnergyFunction,
) -> Result<Vec<f64>> {
    if !candidates.contains(&l) {
        return Err(Error::input(format!("token {} is not a candidate", l)));
    }
    let features = model.features(z);
    let p = conditional_distribution(&features, s, candidates, f)?;
    let mut grad = Array2::zeros(features.dim());
    for (&c, &pc) in candidates.iter().zip(&p) {
        let weight = if c == l { 1.0 - pc } else { -pc };
        let g = f.energy_with_grad(features.row(c), features.row(s))?;
        grad.row_mut(c).scaled_add(weight, &g.d_a);
        grad.row_mut(s).scaled_add(weight, &g.d_b);
    }
    Ok(model.pullback(z, &grad))
}

/// Small smooth feature map `A = tanh(W z + b)` reshaped to `tokens × positions`,
/// used to exercise the likelihood gradient on random instances.
#[derive(Debug, Clone)]
pub struct ToyFeatureMap {
    tokens: usize,
    positions: usize,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl ToyFeatureMap {
    pub fn random(tokens: usize, positions: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        let out = tokens * positions;
        let w = Array2::from_shape_fn((out, dim), |_| normal.sample(&mut rng));
        let b = Array1::from_shape_fn(out, |_| normal.sample(&mut rng));
        Self { tokens, positions, w, b }
    }

    fn pre(&self, z: &[f64]) -> Array1<f64> {
        self.w.dot(&Array1::from(z.to_vec())) + &self.b
    }
}

impl DifferentiableFeatures for ToyFeatureMap {
    fn dim(&self) -> usize {
        self.w.ncols()
    }

    fn features(&self, z: &[f64]) -> Array2<f64> {
        self.pre(z)
            .mapv(f64::tanh)
            .into_shape_with_order((self.tokens, self.positions))
            .expect("shape matches")
    }

    fn pullback(&self, z: &[f64], grad_features: &Array2<f64>) -> Vec<f64> {
        let pre = self.pre(z);
        let g = Array1::from_iter(grad_features.iter().cloned()) * pre.mapv(|v| 1.0 - v.tanh().powi(2));
        self.w.t().dot(&g).to_vec()
    }
}
