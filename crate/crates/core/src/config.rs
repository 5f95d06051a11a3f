//! Run configuration with layered overrides and the reproducibility manifest.
//!
//! Values resolve as command-line flags over a config file over built-in
//! defaults. Config files are TOML or JSON with the same keys as
//! [`ConfigLayer`]; a run manifest is itself a valid config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editing::EditMode;
use crate::energy::{Ablations, GuidanceHyperparams, DEFAULT_ALPHA, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::eval::Category;
use crate::guidance::SamplerConfig;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
/// Seeds used per prompt by `evaluate` when none are given.
pub const DEFAULT_EVAL_SEEDS: u64 = 64;

/// One layer of optional settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigLayer {
    pub prompt: Option<String>,
    pub dataset: Option<PathBuf>,
    pub category: Option<Category>,
    pub seeds: Option<Vec<u64>>,
    pub images_per_prompt: Option<usize>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub update_steps: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub energy: Option<String>,
    pub no_repulsion: Option<bool>,
    pub no_objcond: Option<bool>,
    pub external_modifiers: Option<Vec<String>>,
    pub single_forward: Option<bool>,
    pub adapter: Option<String>,
    pub model_seed: Option<u64>,
    pub annotator: Option<String>,
    pub scorer: Option<String>,
    pub captioner: Option<String>,
    pub captions: Option<usize>,
    pub out: Option<PathBuf>,
    pub edit: Option<EditLayer>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditLayer {
    pub source: Option<String>,
    pub edited: Option<String>,
    pub mode: Option<EditMode>,
    pub reweight_factor: Option<f64>,
    pub reweight_words: Option<Vec<String>>,
    pub cross_replace: Option<f64>,
    pub self_replace: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )+
    };
}

impl ConfigLayer {
    /// Fields set in `top` replace those of `self`.
    pub fn overlay(&mut self, top: &ConfigLayer) {
        overlay!(
            self, top, prompt, dataset, category, seeds, images_per_prompt, lambda, alpha, steps, update_steps,
            guidance_scale, energy, no_repulsion, no_objcond, external_modifiers, single_forward, adapter,
            model_seed, annotator, scorer, captioner, captions, out
        );
        match (&mut self.edit, &top.edit) {
            (Some(mine), Some(theirs)) => {
                overlay!(mine, theirs, source, edited, mode, reweight_factor, reweight_words, cross_replace, self_replace);
            }
            (None, Some(theirs)) => self.edit = Some(theirs.clone()),
            _ => {}
        }
    }

    /// Reads a TOML or JSON config file; a run manifest's `config` entry is
    /// accepted as well.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {}", path.display(), e)))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            let mut v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("invalid JSON config {}: {}", path.display(), e)))?;
            if let Some(cfg) = v.get_mut("config") {
                v = cfg.take();
            }
            let resolved: Option<RunConfig> = serde_json::from_value(v.clone()).ok();
            match resolved {
                Some(r) => Ok(r.into_layer()),
                None => serde_json::from_value(v)
                    .map_err(|e| Error::config(format!("invalid config {}: {}", path.display(), e))),
            }
        } else {
            toml::from_str(&text).map_err(|e| Error::config(format!("invalid config {}: {}", path.display(), e)))
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompt: Option<String>,
    pub dataset: Option<PathBuf>,
    pub category: Option<Category>,
    pub seeds: Vec<u64>,
    pub images_per_prompt: usize,
    /// `None` selects each benchmark category's default.
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub steps: usize,
    pub update_steps: usize,
    pub guidance_scale: f64,
    pub energy: String,
    pub no_repulsion: bool,
    pub no_objcond: bool,
    pub external_modifiers: Vec<String>,
    pub single_forward: bool,
    pub adapter: String,
    pub model_seed: u64,
    pub annotator: String,
    pub scorer: String,
    pub captioner: String,
    pub captions: usize,
    pub out: PathBuf,
    pub edit: Option<EditLayer>,
}

/// Which default seed list to use when none is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedDefault {
    Single,
    Benchmark,
}

impl RunConfig {
    pub fn resolve(layers: &[&ConfigLayer], seed_default: SeedDefault) -> Result<Self> {
        let mut c = ConfigLayer::default();
        for l in layers {
            c.overlay(l);
        }
        let steps = c.steps.unwrap_or(DEFAULT_STEPS);
        let seeds = c.seeds.unwrap_or_else(|| match seed_default {
            SeedDefault::Single => vec![0],
            SeedDefault::Benchmark => (0..DEFAULT_EVAL_SEEDS).collect(),
        });
        let cfg = RunConfig {
            prompt: c.prompt,
            dataset: c.dataset,
            category: c.category,
            images_per_prompt: c.images_per_prompt.unwrap_or(seeds.len()),
            seeds,
            lambda: c.lambda,
            alpha: c.alpha.unwrap_or(DEFAULT_ALPHA),
            steps,
            update_steps: c.update_steps.unwrap_or(GuidanceHyperparams::half_window(steps)),
            guidance_scale: c.guidance_scale.unwrap_or(DEFAULT_GUIDANCE_SCALE),
            energy: c.energy.unwrap_or_else(|| "cosine".into()),
            no_repulsion: c.no_repulsion.unwrap_or(false),
            no_objcond: c.no_objcond.unwrap_or(false),
            external_modifiers: c.external_modifiers.unwrap_or_default(),
            single_forward: c.single_forward.unwrap_or(false),
            adapter: c.adapter.unwrap_or_else(|| "toy".into()),
            model_seed: c.model_seed.unwrap_or(0),
            annotator: c.annotator.unwrap_or_else(|| "auto".into()),
            scorer: c.scorer.unwrap_or_else(|| "palette".into()),
            captioner: c.captioner.unwrap_or_else(|| "palette".into()),
            captions: c.captions.unwrap_or(1),
            out: c.out.unwrap_or_else(|| PathBuf::from("ebama-out")),
            edit: c.edit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler(0).validate()?;
        self.hyper(None).validate(self.steps)?;
        if self.seeds.is_empty() {
            return Err(Error::input("at least one seed is required"));
        }
        Ok(())
    }

    /// λ for a prompt of `category` (or the general default).
    pub fn lambda_for(&self, category: Option<Category>) -> f64 {
        self.lambda
            .unwrap_or_else(|| category.map_or(DEFAULT_LAMBDA, Category::default_lambda))
    }

    pub fn hyper(&self, category: Option<Category>) -> GuidanceHyperparams {
        GuidanceHyperparams {
            alpha: self.alpha,
            lambda: self.lambda_for(category),
            update_steps: self.update_steps,
            energy: self.energy.clone(),
            ablations: Ablations {
                no_repulsion: self.no_repulsion,
                no_object_conditioning: self.no_objcond,
                no_binding: false,
            },
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            total_steps: self.steps,
            guidance_scale: self.guidance_scale,
            seed,
            single_forward: self.single_forward,
        }
    }

    pub fn into_layer(self) -> ConfigLayer {
        ConfigLayer {
            prompt: self.prompt,
            dataset: self.dataset,
            category: self.category,
            seeds: Some(self.seeds),
            images_per_prompt: Some(self.images_per_prompt),
            lambda: self.lambda,
            alpha: Some(self.alpha),
            steps: Some(self.steps),
            update_steps: Some(self.update_steps),
            guidance_scale: Some(self.guidance_scale),
            energy: Some(self.energy),
            no_repulsion: Some(self.no_repulsion),
            no_objcond: Some(self.no_objcond),
            external_modifiers: Some(self.external_modifiers),
            single_forward: Some(self.single_forward),
            adapter: Some(self.adapter),
            model_seed: Some(self.model_seed),
            annotator: Some(self.annotator),
            scorer: Some(self.scorer),
            captioner: Some(self.captioner),
            captions: Some(self.captions),
            out: Some(self.out),
            edit: self.edit,
        }
    }
}

/// Hyperparameter swept by the `ablate` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    Lambda,
    Alpha,
    UpdateSteps,
    Repulsion,
    Energy,
    Objcond,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "lambda" => Ok(Sweep::Lambda),
            "alpha" => Ok(Sweep::Alpha),
            "update-steps" => Ok(Sweep::UpdateSteps),
            "repulsion" => Ok(Sweep::Repulsion),
            "energy" => Ok(Sweep::Energy),
            "objcond" => Ok(Sweep::Objcond),
            _ => Err(Error::input(format!(
                "unknown sweep '{}'; expected lambda, alpha, update-steps, repulsion, energy or objcond",
                s
            ))),
        }
    }
}

impl Sweep {
    fn default_values(self) -> Option<Vec<String>> {
        match self {
            Sweep::Repulsion | Sweep::Objcond => Some(vec!["on".into(), "off".into()]),
            Sweep::Energy => Some(vec!["cosine".into(), "kl".into()]),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Sweep::Lambda => "lambda",
            Sweep::Alpha => "alpha",
            Sweep::UpdateSteps => "update-steps",
            Sweep::Repulsion => "repulsion",
            Sweep::Energy => "energy",
            Sweep::Objcond => "objcond",
        }
    }
}

fn parse_switch(v: &str) -> Result<bool> {
    match v.to_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::input(format!("expected on/off, got '{}'", v))),
    }
}

fn parse_value<T: std::str::FromStr>(sweep: Sweep, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::input(format!("invalid {} value '{}'", sweep.name(), v)))
}

/// One labelled configuration per swept value.
pub fn sweep_variants(base: &RunConfig, sweep: Sweep, values: &[String]) -> Result<Vec<(String, RunConfig)>> {
    let values = if values.is_empty() {
        sweep
            .default_values()
            .ok_or_else(|| Error::input(format!("--values is required for the {} sweep", sweep.name())))?
    } else {
        values.to_vec()
    };
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            match sweep {
                Sweep::Lambda => c.lambda = Some(parse_value(sweep, v)?),
                Sweep::Alpha => c.alpha = parse_value(sweep, v)?,
                Sweep::UpdateSteps => c.update_steps = parse_value(sweep, v)?,
                Sweep::Repulsion => c.no_repulsion = !parse_switch(v)?,
                Sweep::Objcond => c.no_objcond = !parse_switch(v)?,
                Sweep::Energy => c.energy = v.trim().to_string(),
            }
            c.validate()?;
            Ok((format!("{}={}", sweep.name(), v.trim()), c))
        })
        .collect()
}

/// Record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
