use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{decompose_subprompts, BenchmarkPrompt, Category};
use super::metrics::{full_similarity, min_similarity, text_caption_similarity, Captioner, SimilarityScorer};
use crate::denoiser::DenoiserAdapter;
use crate::energy::GuidanceHyperparams;
use crate::error::{Error, Result};
use crate::guidance::{guided_sample_with_externals, SamplerConfig};
use crate::prompt_graph::{parse_prompt, Annotator};

/// One generation method under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    /// Seed is overridden per generation.
    pub sampler: SamplerConfig,
    pub hyper: GuidanceHyperparams,
    /// Fixed λ; `None` selects each category's default.
    pub lambda: Option<f64>,
    #[serde(default)]
    pub external_words: Vec<String>,
}

impl MethodConfig {
    pub fn hyper_for(&self, category: Category) -> GuidanceHyperparams {
        GuidanceHyperparams {
            lambda: self.lambda.unwrap_or(category.default_lambda()),
            ..self.hyper.clone()
        }
    }
}

/// Models and outputs shared by every generation in a benchmark.
pub struct EvalContext<'a> {
    pub adapter: &'a dyn DenoiserAdapter,
    pub annotator: &'a dyn Annotator,
    pub scorer: &'a dyn SimilarityScorer,
    pub captioner: &'a dyn Captioner,
    pub captions: usize,
    /// Where generated images are written; `None` keeps them in memory only.
    pub image_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt: String,
    pub category: Category,
    pub seed: u64,
    pub image: String,
    pub full_sim: f64,
    pub min_sim: f64,
    pub tc_sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub category: Category,
    pub prompts: usize,
    pub full_sim: f64,
    pub min_sim: f64,
    pub tc_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub records: Vec<EvalRecord>,
    pub summary: Vec<CategoryScores>,
}

fn evaluate_prompt(
    ctx: &EvalContext<'_>,
    index: usize,
    prompt: &BenchmarkPrompt,
    method: &MethodConfig,
    seeds: &[u64],
) -> Result<Vec<EvalRecord>> {
    let (tokens, graph) = parse_prompt(ctx.annotator, &prompt.text)?;
    let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    let subprompts = if graph.is_empty() {
        vec![prompt.text.clone()]
    } else {
        decompose_subprompts(&words, &graph)?
    };
    let hyper = method.hyper_for(prompt.category);
    seeds
        .iter()
        .map(|&seed| {
            let sampler = SamplerConfig {
                seed,
                ..method.sampler.clone()
            };
            let out = guided_sample_with_externals(ctx.adapter, &words, &graph, &sampler, &hyper, &method.external_words)?;
            let name = format!("{:04}_s{}.png", index, seed);
            let image = match &ctx.image_dir {
                Some(dir) => {
                    let path = dir.join(&name);
                    out.image.save(&path)?;
                    path.to_string_lossy().into_owned()
                }
                None => name,
            };
            Ok(EvalRecord {
                prompt: prompt.text.clone(),
                category: prompt.category,
                seed,
                image,
                full_sim: full_similarity(&out.image, &prompt.text, ctx.scorer)?,
                min_sim: min_similarity(&out.image, &subprompts, ctx.scorer)?,
                tc_sim: text_caption_similarity(&out.image, &prompt.text, ctx.captioner, ctx.scorer, ctx.captions)?,
            })
        })
        .collect()
}

/// Category means of per-prompt means, in first-appearance order.
pub fn summarize(records: &[EvalRecord]) -> Vec<CategoryScores> {
    let mut per_prompt: Vec<(Category, &str, Vec<&EvalRecord>)> = Vec::new();
    for r in records {
        match per_prompt.iter_mut().find(|(c, p, _)| *c == r.category && *p == r.prompt) {
            Some(entry) => entry.2.push(r),
            None => per_prompt.push((r.category, &r.prompt, vec![r])),
        }
    }
    let mut order: Vec<Category> = Vec::new();
    let mut sums: BTreeMap<Category, (usize, f64, f64, f64)> = BTreeMap::new();
    for (cat, _, recs) in &per_prompt {
        if !order.contains(cat) {
            order.push(*cat);
        }
        let n = recs.len() as f64;
        let e = sums.entry(*cat).or_default();
        e.0 += 1;
        e.1 += recs.iter().map(|r| r.full_sim).sum::<f64>() / n;
        e.2 += recs.iter().map(|r| r.min_sim).sum::<f64>() / n;
        e.3 += recs.iter().map(|r| r.tc_sim).sum::<f64>() / n;
    }
    order
        .into_iter()
        .map(|c| {
            let (n, f, m, t) = sums[&c];
            let k = n as f64;
            CategoryScores {
                category: c,
                prompts: n,
                full_sim: f / k,
                min_sim: m / k,
                tc_sim: t / k,
            }
        })
        .collect()
}

/// Generates `images_per_prompt` images per prompt with the shared seed list
/// and scores each.
pub fn run_benchmark(
    ctx: &EvalContext<'_>,
    prompts: &[BenchmarkPrompt],
    method: &MethodConfig,
    seeds: &[u64],
    images_per_prompt: usize,
) -> Result<BenchmarkReport> {
    if seeds.len() < images_per_prompt {
        return Err(Error::input(format!(
            "{} images per prompt requested but only {} seeds given",
            images_per_prompt,
            seeds.len()
        )));
    }
    let seeds = &seeds[..images_per_prompt];
    if let Some(dir) = &ctx.image_dir {
        std::fs::create_dir_all(dir)?;
    }
    let records: Vec<EvalRecord> = if seeds.is_empty() {
        Vec::new()
    } else {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| evaluate_prompt(ctx, i, p, method, seeds))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect()
    };
    Ok(BenchmarkReport {
        method: method.name.clone(),
        seeds: seeds.to_vec(),
        summary: summarize(&records),
        records,
    })
}

/// Runs several methods over the same prompts and seeds.
pub fn run_comparison(
    ctx: &EvalContext<'_>,
    prompts: &[BenchmarkPrompt],
    methods: &[MethodConfig],
    seeds: &[u64],
    images_per_prompt: usize,
) -> Result<Vec<BenchmarkReport>> {
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        let dir = ctx.image_dir.as_ref().map(|d| d.join(sanitize(&m.name)));
        let sub = EvalContext {
            image_dir: dir,
            adapter: ctx.adapter,
            annotator: ctx.annotator,
            scorer: ctx.scorer,
            captioner: ctx.captioner,
            captions: ctx.captions,
        };
        reports.push(run_benchmark(&sub, prompts, m, seeds, images_per_prompt)?);
    }
    if let Some(first) = reports.first() {
        assert!(
            reports.iter().all(|r| r.seeds == first.seeds),
            "seed lists differ between compared methods"
        );
    }
    Ok(reports)
}

/// File-system friendly form of a method label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn fmt_score(v: f64) -> String {
    format!("{:.6}", v)
}

/// Per-record rows: prompt, category, seed, image path, full/min/tc.
pub fn write_records_csv(reports: &[BenchmarkReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "prompt", "category", "seed", "image", "full_sim", "min_sim", "tc_sim"])?;
    for rep in reports {
        for r in &rep.records {
            w.write_record([
                rep.method.as_str(),
                r.prompt.as_str(),
                r.category.as_str(),
                &r.seed.to_string(),
                r.image.as_str(),
                &fmt_score(r.full_sim),
                &fmt_score(r.min_sim),
                &fmt_score(r.tc_sim),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn categories_of(reports: &[BenchmarkReport]) -> Vec<Category> {
    let mut cats = Vec::new();
    for rep in reports {
        for s in &rep.summary {
            if !cats.contains(&s.category) {
                cats.push(s.category);
            }
        }
    }
    cats
}

/// Summary in the comparison-table layout: one row per method, three
/// columns (full, min, text-caption similarity) per benchmark.
pub fn write_summary_csv(reports: &[BenchmarkReport], out: impl Write) -> Result<()> {
    let cats = categories_of(reports);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string()];
    for c in &cats {
        header.extend(["full_sim", "min_sim", "tc_sim"].map(|m| format!("{}/{}", c, m)));
    }
    w.write_record(&header)?;
    for rep in reports {
        let mut row = vec![rep.method.clone()];
        for c in &cats {
            match rep.summary.iter().find(|s| s.category == *c) {
                Some(s) => row.extend([s.full_sim, s.min_sim, s.tc_sim].map(fmt_score)),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text rendering of [`write_summary_csv`].
pub fn render_summary_table(reports: &[BenchmarkReport]) -> String {
    let cats = categories_of(reports);
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:width$}", "method", width = width);
    for c in &cats {
        s.push_str(&format!(" | {:^23}", c.as_str()));
    }
    s.push('\n');
    s.push_str(&format!("{:width$}", "", width = width));
    for _ in &cats {
        s.push_str(" |  full    min     t-c  ");
    }
    s.push('\n');
    for rep in reports {
        s.push_str(&format!("{:width$}", rep.method, width = width));
        for c in &cats {
            match rep.summary.iter().find(|x| x.category == *c) {
                Some(x) => s.push_str(&format!(" | {:.3}  {:.3}  {:.3}  ", x.full_sim, x.min_sim, x.tc_sim)),
                None => s.push_str(&format!(" | {:23}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `records.csv`, `summary.csv` and `summary.txt` into `dir`.
pub fn write_reports(dir: &Path, reports: &[BenchmarkReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records_csv(reports, std::fs::File::create(dir.join("records.csv"))?)?;
    write_summary_csv(reports, std::fs::File::create(dir.join("summary.csv"))?)?;
    std::fs::write(dir.join("summary.txt"), render_summary_table(reports))?;
    Ok(())
}

/// Published full-scale scores (Stable Diffusion v1.4, 64 images per prompt).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScores {
    pub method: &'static str,
    pub category: Category,
    pub full_sim: f64,
    pub min_sim: f64,
    pub tc_sim: f64,
}

pub const REFERENCE_TOLERANCE: f64 = 0.01;

pub fn reference_scores() -> Vec<ReferenceScores> {
    use Category::*;
    let row = |method, category, full_sim, min_sim, tc_sim| ReferenceScores {
        method,
        category,
        full_sim,
        min_sim,
        tc_sim,
    };
    vec![
        row("ours", AnimalAnimal, 0.340, 0.256, 0.817),
        row("ours", AnimalObject, 0.362, 0.270, 0.851),
        row("ours", ObjectObject, 0.366, 0.274, 0.836),
        row("lambda=0", AnimalAnimal, 0.340, 0.255, 0.814),
        row("lambda=0", AnimalObject, 0.362, 0.271, 0.851),
        row("lambda=0", ObjectObject, 0.360, 0.270, 0.823),
        row("external-1", AnimalAnimal, 0.337, 0.254, 0.812),
        row("external-3", AnimalAnimal, 0.331, 0.248, 0.822),
    ]
}

/// Cells of `report` deviating from the reference row of `method` by more
/// than the tolerance, as `(category, metric, got, expected)`.
pub fn reference_deviations(report: &BenchmarkReport, method: &str) -> Vec<(Category, &'static str, f64, f64)> {
    let mut out = Vec::new();
    for r in reference_scores().into_iter().filter(|r| r.method == method) {
        let Some(s) = report.summary.iter().find(|s| s.category == r.category) else {
            continue;
        };
        for (name, got, want) in [
            ("full_sim", s.full_sim, r.full_sim),
            ("min_sim", s.min_sim, r.min_sim),
            ("tc_sim", s.tc_sim, r.tc_sim),
        ] {
            if (got - want).abs() > REFERENCE_TOLERANCE {
                out.push((r.category, name, got, want));
            }
        }
    }
    out
}
