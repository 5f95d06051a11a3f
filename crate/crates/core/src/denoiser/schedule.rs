use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete noise schedule `ᾱ_t` over the training timesteps, with DDIM
/// timestep spacing ("leading" spacing plus a step offset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
    steps_offset: usize,
}

impl NoiseSchedule {
    fn from_betas(betas: impl Iterator<Item = f64>, steps_offset: usize) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self {
            alphas_cumprod,
            steps_offset,
        }
    }

    /// Betas spaced linearly in `√β` (the Stable Diffusion schedule).
    pub fn scaled_linear(beta_start: f64, beta_end: f64, train_steps: usize) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let n = train_steps.max(2) - 1;
        Self::from_betas(
            (0..train_steps).map(move |i| (a + (b - a) * i as f64 / n as f64).powi(2)),
            1,
        )
    }

    pub fn linear(beta_start: f64, beta_end: f64, train_steps: usize) -> Self {
        let n = train_steps.max(2) - 1;
        Self::from_betas(
            (0..train_steps).map(move |i| beta_start + (beta_end - beta_start) * i as f64 / n as f64),
            1,
        )
    }

    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(0.00085, 0.012, 1000)
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t.min(self.alphas_cumprod.len() - 1)]
    }

    fn step_ratio(&self, total_steps: usize) -> Result<usize> {
        if total_steps == 0 || total_steps > self.train_steps() {
            return Err(Error::input(format!(
                "total_steps must be in 1..={}, got {}",
                self.train_steps(),
                total_steps
            )));
        }
        Ok(self.train_steps() / total_steps)
    }

    /// Sampling timesteps, from noisiest to cleanest.
    pub fn ddim_timesteps(&self, total_steps: usize) -> Result<Vec<usize>> {
        let ratio = self.step_ratio(total_steps)?;
        let last = self.train_steps() - 1;
        Ok((0..total_steps)
            .rev()
            .map(|i| (i * ratio + self.steps_offset).min(last))
            .collect())
    }

    /// `ᾱ` of the timestep that follows `t`; the first training `ᾱ` past the end.
    pub fn alpha_bar_prev(&self, t: usize, total_steps: usize) -> Result<f64> {
        let ratio = self.step_ratio(total_steps)?;
        Ok(match t.checked_sub(ratio) {
            Some(prev) => self.alpha_bar(prev),
            None => self.alphas_cumprod[0],
        })
    }
}

/// Deterministic DDIM update (η = 0) applied elementwise.
pub fn ddim_step(z: &[f64], eps: &[f64], alpha_bar: f64, alpha_bar_prev: f64) -> Vec<f64> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    z.iter()
        .zip(eps)
        .map(|(&x, &e)| {
            let x0 = (x - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect()
}
