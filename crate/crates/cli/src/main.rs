use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use ebama::config::{sweep_variants, ConfigLayer, EditLayer, Manifest, RunConfig, SeedDefault, Sweep};
use ebama::denoiser::{resolve_adapter, serve_worker, DenoiserAdapter};
use ebama::editing::{edit, EditMode, EditSpec};
use ebama::eval::{
    captioner_registry, load_dataset, reference_deviations, render_summary_table, run_comparison,
    scorer_registry, template_prompts, BenchmarkPrompt, Captioner, Category, EvalContext, MethodConfig,
    RecordedModels, SimilarityScorer,
};
use ebama::guidance::{guided_sample_with_externals, GuidedSample};
use ebama::prompt_graph::{annotator_registry, parse_prompt, Annotator, GraphRecord};

#[derive(Parser)]
#[command(name = "ebama", version, about = "Object-conditioned attention guidance for text-to-image diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the object graph of a prompt
    Parse(ParseArgs),
    /// Generate guided images for a prompt or a dataset
    Generate(RunArgs),
    /// Run the benchmark metrics over a dataset
    Evaluate(EvalArgs),
    /// Sweep one hyperparameter and report each setting
    Ablate(AblateArgs),
    /// Attention-replacement editing of a guided generation
    Edit(EditArgs),
    /// Serve a denoiser over the worker protocol on stdin/stdout
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "auto")]
    annotator: String,
    /// Print the graph as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Config file (TOML or JSON); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Dataset file with one prompt per line
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds or a range such as 0..64
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    update_steps: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long, value_parser = ["cosine", "kl"])]
    energy: Option<String>,
    #[arg(long)]
    no_repulsion: bool,
    #[arg(long)]
    no_objcond: bool,
    /// Comma-separated words appended to the prompt for the loss only
    #[arg(long, value_delimiter = ',')]
    external_modifiers: Option<Vec<String>>,
    /// Reuse the pre-update forward for the sampler step
    #[arg(long)]
    single_forward: bool,
    #[arg(long, value_parser = ["real", "toy"])]
    adapter: Option<String>,
    /// Seed of the toy denoiser's weights
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    annotator: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Use a built-in prompt set instead of a dataset file
    #[arg(long)]
    template: Option<String>,
    /// Only use the first N prompts
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    images_per_prompt: Option<usize>,
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    captioner: Option<String>,
    /// Number of captions per image
    #[arg(long)]
    captions: Option<usize>,
    /// JSON file of recorded embeddings and captions, used as scorer and captioner
    #[arg(long)]
    recorded: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    bench: BenchArgs,
    /// Label of this method in the reports
    #[arg(long, default_value = "ours")]
    method_name: String,
    /// Compare the summary against a published row (e.g. "ours") within ±0.01
    #[arg(long)]
    compare_reference: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long)]
    sweep: String,
    /// Comma-separated values of the swept setting
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    edited: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    reweight_factor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    reweight_words: Option<Vec<String>>,
    #[arg(long)]
    cross_replace: Option<f64>,
    #[arg(long)]
    self_replace: Option<f64>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "toy")]
    adapter: String,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b <= a {
            bail!(ebama::Error::Input(format!("empty seed range {}", s)));
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| ebama::Error::Input(format!("invalid seed '{}'", p)).into())
        })
        .collect()
}

impl CommonArgs {
    fn layer(&self) -> Result<ConfigLayer> {
        let seeds = match (&self.seed, &self.seeds) {
            (Some(s), _) => Some(vec![*s]),
            (None, Some(list)) => Some(parse_seeds(list)?),
            _ => None,
        };
        Ok(ConfigLayer {
            prompt: self.prompt.clone(),
            dataset: self.dataset.clone(),
            category: self.category.as_deref().map(str::parse).transpose()?,
            seeds,
            lambda: self.lambda,
            alpha: self.alpha,
            steps: self.steps,
            update_steps: self.update_steps,
            guidance_scale: self.guidance_scale,
            energy: self.energy.clone(),
            no_repulsion: self.no_repulsion.then_some(true),
            no_objcond: self.no_objcond.then_some(true),
            external_modifiers: self.external_modifiers.clone(),
            single_forward: self.single_forward.then_some(true),
            adapter: self.adapter.clone(),
            model_seed: self.model_seed,
            annotator: self.annotator.clone(),
            out: self.out.clone(),
            ..Default::default()
        })
    }

    fn resolve(&self, extra: ConfigLayer, seeds: SeedDefault) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => ConfigLayer::from_file(p)?,
            None => ConfigLayer::default(),
        };
        let mut cli = self.layer()?;
        cli.overlay(&extra);
        Ok(RunConfig::resolve(&[&file, &cli], seeds)?)
    }
}

impl BenchArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            images_per_prompt: self.images_per_prompt,
            scorer: self.scorer.clone(),
            captioner: self.captioner.clone(),
            captions: self.captions,
            ..Default::default()
        }
    }
}

struct Session {
    adapter: Arc<dyn DenoiserAdapter>,
    annotator: Arc<dyn Annotator>,
}

impl Session {
    fn open(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            adapter: resolve_adapter(&cfg.adapter, cfg.model_seed)?,
            annotator: annotator_registry().get(&cfg.annotator)?,
        })
    }
}

fn prompts_of(cfg: &RunConfig, template: Option<&str>, limit: Option<usize>) -> Result<Vec<BenchmarkPrompt>> {
    let mut prompts = match (template, &cfg.dataset, &cfg.prompt) {
        (Some(t), _, _) => template_prompts(t.parse()?, cfg.model_seed)?,
        (None, Some(path), _) => load_dataset(path, cfg.category)?,
        (None, None, Some(p)) => vec![BenchmarkPrompt {
            text: p.clone(),
            category: cfg.category.unwrap_or(Category::Abc6k),
        }],
        (None, None, None) => bail!(ebama::Error::Input(
            "give --prompt, --dataset or --template".into()
        )),
    };
    if let Some(n) = limit {
        prompts.truncate(n);
    }
    Ok(prompts)
}

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let annotator = annotator_registry().get(&args.annotator)?;
    let (tokens, graph) = parse_prompt(annotator.as_ref(), &args.prompt)?;
    let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    let record = GraphRecord::new(&args.prompt, &words, &graph);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&record)?);
    } else {
        println!("{}", record.summary());
    }
    Ok(())
}

fn write_sample(dir: &Path, stem: &str, sample: &GuidedSample, meta: serde_json::Value) -> Result<Vec<String>> {
    let images = dir.join("images");
    let traces = dir.join("traces");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&traces)?;
    let png = images.join(format!("{}.png", stem));
    sample.image.save(&png).with_context(|| format!("writing {}", png.display()))?;
    let sidecar = images.join(format!("{}.json", stem));
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
    let trace = traces.join(format!("{}.jsonl", stem));
    sample.trace.write_jsonl(std::io::BufWriter::new(std::fs::File::create(&trace)?))?;
    Ok([png, sidecar, trace]
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
        .collect())
}

fn cmd_generate(args: RunArgs) -> Result<()> {
    let cfg = args.common.resolve(ConfigLayer::default(), SeedDefault::Single)?;
    let session = Session::open(&cfg)?;
    let prompts = prompts_of(&cfg, None, None)?;
    let mut manifest = Manifest::new("generate", &cfg);
    for (i, p) in prompts.iter().enumerate() {
        let (tokens, graph) = parse_prompt(session.annotator.as_ref(), &p.text)?;
        let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
        let record = GraphRecord::new(&p.text, &words, &graph);
        let hyper = cfg.hyper(cfg.dataset.as_ref().map(|_| p.category));
        for &seed in &cfg.seeds {
            let sampler = cfg.sampler(seed);
            let sample = guided_sample_with_externals(
                session.adapter.as_ref(),
                &words,
                &graph,
                &sampler,
                &hyper,
                &cfg.external_modifiers,
            )?;
            let meta = json!({
                "prompt": p.text,
                "seed": seed,
                "graph": record.summary(),
                "sampler": sampler,
                "guidance": hyper,
                "external_modifiers": cfg.external_modifiers,
                "adapter": session.adapter.name(),
                "version": env!("CARGO_PKG_VERSION"),
            });
            let stem = format!("{:03}_s{}", i, seed);
            manifest.outputs.extend(write_sample(&cfg.out, &stem, &sample, meta)?);
            info!("{} seed {} -> {}", p.text, seed, stem);
        }
    }
    let path = manifest.write(&cfg.out)?;
    println!("wrote {} images; manifest {}", prompts.len() * cfg.seeds.len(), path.display());
    Ok(())
}

fn models(cfg: &RunConfig, bench: &BenchArgs) -> Result<(Arc<dyn SimilarityScorer>, Arc<dyn Captioner>)> {
    if let Some(path) = &bench.recorded {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ebama::Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let rec = Arc::new(RecordedModels::from_json(&text)?);
        return Ok((rec.clone(), rec));
    }
    let hint = |kind: &str, name: &str| {
        if name == "real" {
            ebama::Error::Config(format!(
                "no real {} is bundled; record embeddings with the model of your choice and pass them via --recorded",
                kind
            ))
        } else {
            ebama::Error::Config(format!("unknown {} '{}'", kind, name))
        }
    };
    let scorer = scorer_registry().get(&cfg.scorer).map_err(|_| hint("scorer", &cfg.scorer))?;
    let captioner = captioner_registry()
        .get(&cfg.captioner)
        .map_err(|_| hint("captioner", &cfg.captioner))?;
    Ok((scorer, captioner))
}

fn method_of(name: &str, cfg: &RunConfig) -> MethodConfig {
    MethodConfig {
        name: name.to_string(),
        sampler: cfg.sampler(0),
        hyper: cfg.hyper(None),
        lambda: cfg.lambda,
        external_words: cfg.external_modifiers.clone(),
    }
}

fn run_bench(
    command: &str,
    cfg: &RunConfig,
    bench: &BenchArgs,
    methods: &[MethodConfig],
) -> Result<Vec<ebama::eval::BenchmarkReport>> {
    let session = Session::open(cfg)?;
    let (scorer, captioner) = models(cfg, bench)?;
    let prompts = prompts_of(cfg, bench.template.as_deref(), bench.limit)?;
    let ctx = EvalContext {
        adapter: session.adapter.as_ref(),
        annotator: session.annotator.as_ref(),
        scorer: scorer.as_ref(),
        captioner: captioner.as_ref(),
        captions: cfg.captions,
        image_dir: Some(cfg.out.join("images")),
    };
    let reports = run_comparison(&ctx, &prompts, methods, &cfg.seeds, cfg.images_per_prompt)?;
    ebama::eval::write_reports(&cfg.out, &reports)?;
    let mut manifest = Manifest::new(command, cfg);
    manifest.outputs = vec!["records.csv".into(), "summary.csv".into(), "summary.txt".into()];
    manifest.write(&cfg.out)?;
    print!("{}", render_summary_table(&reports));
    Ok(reports)
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve(args.bench.layer(), SeedDefault::Benchmark)?;
    let reports = run_bench("evaluate", &cfg, &args.bench, &[method_of(&args.method_name, &cfg)])?;
    if let Some(reference) = &args.compare_reference {
        let devs = reference_deviations(&reports[0], reference);
        for (cat, metric, got, want) in &devs {
            println!("deviation: {} {} = {:.3}, reference {:.3}", cat, metric, got, want);
        }
        if !devs.is_empty() {
            bail!(ebama::Error::Degenerate(format!(
                "{} cells outside ±{} of the reference",
                devs.len(),
                ebama::eval::REFERENCE_TOLERANCE
            )));
        }
        println!("all cells within ±{} of '{}'", ebama::eval::REFERENCE_TOLERANCE, reference);
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.common.resolve(args.bench.layer(), SeedDefault::Benchmark)?;
    let sweep: Sweep = args.sweep.parse()?;
    let methods: Vec<MethodConfig> = sweep_variants(&cfg, sweep, &args.values)?
        .iter()
        .map(|(label, c)| method_of(label, c))
        .collect();
    run_bench("ablate", &cfg, &args.bench, &methods)?;
    Ok(())
}

fn cmd_edit(args: EditArgs) -> Result<()> {
    let extra = ConfigLayer {
        edit: Some(EditLayer {
            source: args.source.clone(),
            edited: args.edited.clone(),
            mode: args.mode.as_deref().map(str::parse::<EditMode>).transpose()?,
            reweight_factor: args.reweight_factor,
            reweight_words: args.reweight_words.clone(),
            cross_replace: args.cross_replace,
            self_replace: args.self_replace,
        }),
        ..Default::default()
    };
    let cfg = args.common.resolve(extra, SeedDefault::Single)?;
    let e = cfg.edit.clone().unwrap_or_default();
    let (Some(source), Some(edited)) = (e.source.clone(), e.edited.clone()) else {
        bail!(ebama::Error::Input("edit needs --source and --edited prompts".into()));
    };
    let mut spec = EditSpec::new(&source, &edited, e.mode.unwrap_or(EditMode::WordSwap));
    if let Some(v) = e.reweight_factor {
        spec.reweight_factor = v;
    }
    if let Some(v) = e.reweight_words {
        spec.reweight_words = v;
    }
    if let Some(v) = e.cross_replace {
        spec.cross_replace = v;
    }
    if let Some(v) = e.self_replace {
        spec.self_replace = v;
    }
    let session = Session::open(&cfg)?;
    let hyper = cfg.hyper(None);
    let mut manifest = Manifest::new("edit", &cfg);
    for &seed in &cfg.seeds {
        let sampler = cfg.sampler(seed);
        let out = edit(session.adapter.as_ref(), session.annotator.as_ref(), &spec, &sampler, &hyper)?;
        for (role, prompt, sample) in [("source", &spec.source_prompt, &out.source), ("edited", &spec.edited_prompt, &out.edited)] {
            let meta = json!({
                "prompt": prompt,
                "role": role,
                "seed": seed,
                "edit": spec,
                "sampler": sampler,
                "guidance": hyper,
                "version": env!("CARGO_PKG_VERSION"),
            });
            manifest
                .outputs
                .extend(write_sample(&cfg.out, &format!("{}_s{}", role, seed), sample, meta)?);
        }
    }
    let path = manifest.write(&cfg.out)?;
    println!("wrote {} image pairs; manifest {}", cfg.seeds.len(), path.display());
    Ok(())
}

fn cmd_worker(args: WorkerArgs) -> Result<()> {
    if args.adapter != "toy" {
        bail!(ebama::Error::Config(format!("the worker can only serve the toy adapter, not '{}'", args.adapter)));
    }
    let adapter = resolve_adapter("toy", args.model_seed)?;
    let stdin = std::io::stdin();
    serve_worker(adapter.as_ref(), stdin.lock(), std::io::stdout().lock())?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<ebama::Error>()) {
        Some(ebama::Error::Input(_)) => 2,
        Some(ebama::Error::Config(_)) => 3,
        Some(_) => 4,
        None if err.chain().any(|e| e.is::<std::num::ParseIntError>()) => 2,
        None => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Worker(a) => cmd_worker(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
