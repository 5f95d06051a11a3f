//! Guided DDIM sampling.
//!
//! During the first `update_steps` steps the latent is moved against the
//! gradient of the object-centric loss, computed from the conditional
//! branch's cross-attention; every step then takes a classifier-free-guided
//! DDIM step from the (possibly updated) latent.

use std::collections::BTreeMap;
use std::io::Write;

use image::RgbImage;
use log::warn;
use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, aggregate_backward, AggregatedAttention};
use crate::denoiser::{
    ddim_step, AttentionInjection, DenoiserAdapter, ForwardOutput, Latent, LatentShape, PromptEncoding,
};
use crate::energy::{
    binding_loss_from_energies, intensity_level, GuidanceHyperparams, LossBreakdown, ObjectCentricLoss,
};
use crate::error::{Error, Result};
use crate::prompt_graph::ObjectGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub total_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Reuse the pre-update conditional forward for the DDIM step instead of
    /// running a second forward on the updated latent.
    pub single_forward: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            guidance_scale: 7.5,
            seed: 0,
            single_forward: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::input("total_steps must be at least 1"));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::input(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Standard-normal initial latent drawn from `seed`.
pub fn initial_latent(shape: LatentShape, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Latent::from_shape_simple_fn(shape.dims(), || StandardNormal.sample(&mut rng))
}

/// Attention metrics of one object at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object: usize,
    /// `‖K(Ã_s)‖_∞`.
    pub intensity: f64,
    /// `f(A_s, A_l)` for every other token `l`.
    pub energies: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    /// Whether this step falls in the update window (loss is present).
    pub updated: bool,
    pub loss: Option<LossBreakdown>,
    pub objects: Vec<ObjectMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-step log of a guided run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    /// Graph used for the loss (including any external tokens).
    pub graph: ObjectGraph,
    pub hyper: GuidanceHyperparams,
    pub steps: Vec<StepRecord>,
}

impl GuidanceTrace {
    /// Writes one JSON object per step.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_steps_jsonl(input: &str) -> Result<Vec<StepRecord>> {
        input
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    pub fn update_count(&self) -> usize {
        self.steps.iter().filter(|s| s.loss.is_some()).count()
    }

    /// Largest deviation between each logged total and the total recomputed
    /// from the logged pairwise energies and intensities.
    pub fn consistency_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for step in &self.steps {
            let Some(loss) = &step.loss else { continue };
            if loss.degraded {
                worst = worst.max(loss.total.abs());
                continue;
            }
            let n = self.graph.token_count;
            let mut total = 0.0;
            for m in &step.objects {
                let table: Vec<f64> = (0..n).map(|l| m.energies.get(&l).copied().unwrap_or(f64::NAN)).collect();
                total += binding_loss_from_energies(&table, &self.graph, m.object, self.hyper.ablations)
                    - loss.lambda * m.intensity;
            }
            worst = worst.max((total - loss.total).abs());
        }
        worst
    }
}

/// Hooks into the step loop, used by attention-replacement editing.
pub trait StepController {
    /// Attention overrides for the conditional DDIM-step forward.
    fn injection(&mut self, _step: usize, _timestep: usize) -> Result<Option<AttentionInjection>> {
        Ok(None)
    }

    /// Sees the conditional DDIM-step forward of every step.
    fn observe(&mut self, _step: usize, _timestep: usize, _cond: &ForwardOutput) {}
}

/// Controller that changes nothing.
pub struct NoControl;

impl StepController for NoControl {}

/// What to sample.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub words: &'a [String],
    pub graph: &'a ObjectGraph,
    /// Words appended to the prompt for the loss only.
    pub external_words: &'a [String],
    pub sampler: &'a SamplerConfig,
    pub hyper: &'a GuidanceHyperparams,
}

#[derive(Debug, Clone)]
pub struct GuidedSample {
    pub latent: Latent,
    pub image: RgbImage,
    pub trace: GuidanceTrace,
}

fn metrics(loss: &ObjectCentricLoss, agg: &AggregatedAttention, graph: &ObjectGraph) -> Result<Vec<ObjectMetrics>> {
    if graph.token_count != agg.token_count() {
        return Ok(Vec::new());
    }
    graph
        .objects
        .iter()
        .map(|&s| {
            let table = loss.pair_energies(&agg.features, s)?;
            Ok(ObjectMetrics {
                object: s,
                intensity: intensity_level(agg.score(s))?,
                energies: table
                    .into_iter()
                    .enumerate()
                    .filter(|&(l, _)| l != s)
                    .collect(),
            })
        })
        .collect()
}

fn cfg_noise(uncond: &Latent, cond: &Latent, scale: f64) -> Latent {
    Zip::from(uncond).and(cond).map_collect(|&u, &c| u + scale * (c - u))
}

/// Loss and latent gradient at one latent.
#[derive(Debug, Clone)]
pub struct LossStep {
    pub forward: ForwardOutput,
    pub attention: AggregatedAttention,
    pub breakdown: LossBreakdown,
    /// `∇_z L`; `None` when the loss is degraded or non-finite.
    pub grad: Option<Latent>,
}

/// Runs the conditional forward at `z`, evaluates the loss on its attention
/// and pulls the gradient back to the latent.
pub fn loss_gradient(
    adapter: &dyn DenoiserAdapter,
    z: &Latent,
    t: usize,
    encoding: &PromptEncoding,
    graph: &ObjectGraph,
    loss: &ObjectCentricLoss,
) -> Result<LossStep> {
    let forward = adapter.forward(z, t, encoding, None)?;
    let attention = aggregate(&forward.records, &encoding.alignment)?;
    let lg = loss.total_loss_with_grad(&attention, graph)?;
    let grad = if lg.breakdown.degraded || !lg.breakdown.is_finite() {
        None
    } else {
        let grads = aggregate_backward(&forward.records, &encoding.alignment, &attention, &lg.grad_features, &lg.grad_scores)?;
        Some(adapter.attention_vjp(z, t, encoding, &grads)?)
    };
    Ok(LossStep {
        forward,
        attention,
        breakdown: lg.breakdown,
        grad,
    })
}

/// Runs the full guided sampler with an optional step controller.
pub fn sample_with_controller(
    adapter: &dyn DenoiserAdapter,
    req: &SampleRequest<'_>,
    controller: &mut dyn StepController,
) -> Result<GuidedSample> {
    let SampleRequest {
        words,
        graph,
        external_words,
        sampler,
        hyper,
    } = *req;
    sampler.validate()?;
    hyper.validate(sampler.total_steps)?;
    if graph.token_count != words.len() {
        return Err(Error::input(format!(
            "graph covers {} tokens but the prompt has {} words",
            graph.token_count,
            words.len()
        )));
    }
    let loss = ObjectCentricLoss::from_hyper(hyper)?;
    let schedule = adapter.schedule().clone();
    let timesteps = schedule.ddim_timesteps(sampler.total_steps)?;

    let step_enc = adapter.encode_prompt(words)?;
    let uncond_enc = adapter.encode_unconditional()?;
    let (loss_enc, loss_graph) = if external_words.is_empty() {
        (step_enc.clone(), graph.clone())
    } else {
        let extended: Vec<String> = words.iter().chain(external_words).cloned().collect();
        (adapter.encode_prompt(&extended)?, graph.with_externals(external_words.len())?)
    };
    if graph.is_empty() && hyper.update_steps > 0 {
        warn!("prompt has no objects; guidance is disabled for this run");
    }

    let mut z = initial_latent(adapter.latent_shape(), sampler.seed);
    let mut steps = Vec::with_capacity(timesteps.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let mut record = StepRecord {
            step: i,
            timestep: t,
            updated: i < hyper.update_steps,
            loss: None,
            objects: Vec::new(),
            grad_norm: None,
            note: None,
        };
        let mut reusable = None;
        if record.updated {
            let step = loss_gradient(adapter, &z, t, &loss_enc, &loss_graph, &loss)?;
            record.objects = metrics(&loss, &step.attention, &loss_graph)?;
            if step.breakdown.degraded {
                record.note = Some("no objects; update skipped".into());
            } else if !step.breakdown.is_finite() {
                warn!("step {} (t={}): non-finite loss, update skipped", i, t);
                record.note = Some("non-finite loss; update skipped".into());
            } else if let Some(g) = &step.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        step: i,
                        timestep: t,
                        breakdown: serde_json::to_string(&step.breakdown)?,
                    });
                }
                record.grad_norm = Some(g.iter().map(|v| v * v).sum::<f64>().sqrt());
                if hyper.alpha != 0.0 {
                    z.scaled_add(-hyper.alpha, g);
                }
            }
            record.loss = Some(step.breakdown);
            if sampler.single_forward && external_words.is_empty() {
                reusable = Some(step.forward);
            }
        }

        let injection = controller.injection(i, t)?;
        let cond = match reusable {
            Some(out) if injection.is_none() => out,
            _ => adapter.forward(&z, t, &step_enc, injection.as_ref())?,
        };
        if !record.updated {
            let agg = aggregate(&cond.records, &step_enc.alignment)?;
            record.objects = metrics(&loss, &agg, graph)?;
        }
        controller.observe(i, t, &cond);
        let uncond = adapter.forward(&z, t, &uncond_enc, None)?;
        let eps = cfg_noise(&uncond.noise, &cond.noise, sampler.guidance_scale);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar_prev(t, sampler.total_steps)?;
        let next = ddim_step(
            z.as_slice().expect("standard layout latent"),
            eps.as_standard_layout().as_slice().expect("standard layout"),
            ab,
            ab_prev,
        );
        z = Latent::from_shape_vec(z.dim(), next).expect("same length");
        steps.push(record);
    }
    let image = adapter.decode(&z)?;
    Ok(GuidedSample {
        latent: z,
        image,
        trace: GuidanceTrace {
            graph: loss_graph,
            hyper: hyper.clone(),
            steps,
        },
    })
}

pub fn guided_sample(
    adapter: &dyn DenoiserAdapter,
    words: &[String],
    graph: &ObjectGraph,
    sampler: &SamplerConfig,
    hyper: &GuidanceHyperparams,
) -> Result<GuidedSample> {
    guided_sample_with_externals(adapter, words, graph, sampler, hyper, &[])
}

pub fn guided_sample_with_externals(
    adapter: &dyn DenoiserAdapter,
    words: &[String],
    graph: &ObjectGraph,
    sampler: &SamplerConfig,
    hyper: &GuidanceHyperparams,
    external_words: &[String],
) -> Result<GuidedSample> {
    let req = SampleRequest {
        words,
        graph,
        external_words,
        sampler,
        hyper,
    };
    sample_with_controller(adapter, &req, &mut NoControl)
}

/// Plain classifier-free-guided DDIM sampling.
pub fn unguided_sample(adapter: &dyn DenoiserAdapter, words: &[String], sampler: &SamplerConfig) -> Result<GuidedSample> {
    let hyper = GuidanceHyperparams {
        update_steps: 0,
        ..Default::default()
    };
    guided_sample(adapter, words, &ObjectGraph::empty(words.len()), sampler, &hyper)
}
