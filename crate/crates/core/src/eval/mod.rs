//! Benchmark harness: prompt datasets, image-text similarity metrics and
//! seed-controlled comparison runs.

mod dataset;
mod metrics;
mod runner;

pub use dataset::{
    animal_animal_prompts, animal_object_prompts, decompose_subprompts, dvmp_prompts, load_dataset,
    object_object_prompts, parse_dataset, template_prompts, BenchmarkPrompt, Category, ANIMALS, COLORS, OBJECTS,
};
pub use metrics::{
    captioner_registry, cosine, full_similarity, image_key, min_similarity, scorer_registry,
    text_caption_similarity, Captioner, PaletteCaptioner, PaletteScorer, RecordedModels, SimilarityScorer,
};
pub use runner::{
    reference_deviations, reference_scores, render_summary_table, run_benchmark, run_comparison, sanitize,
    summarize, write_records_csv, write_reports, write_summary_csv, BenchmarkReport, CategoryScores, EvalContext,
    EvalRecord, MethodConfig, ReferenceScores, REFERENCE_TOLERANCE,
};
