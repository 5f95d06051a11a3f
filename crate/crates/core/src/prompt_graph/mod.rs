//! Prompt parsing into objects and their modifier sets.

mod annotation;
mod graph;
mod rules;

pub use annotation::{
    parse_fixture, prompt_key, render_fixture, tokenize, validate, Annotator, ChainAnnotator,
    FixtureAnnotator, TokenAnnotation,
};
pub use graph::{
    append_external_modifiers, extract_object_graph, GraphRecord, ObjectGraph, ObjectRecord,
    TokenRef, MODIFIER_DEPS,
};
pub use rules::RuleAnnotator;

use std::sync::Arc;

use crate::registry::Registry;

/// Built-in annotators: `fixture` (recorded parses), `rules` (lexicon-based
/// dependency heuristics) and `auto` (fixture first, rules as fallback).
pub fn annotator_registry() -> Registry<dyn Annotator> {
    let fixture: Arc<dyn Annotator> = Arc::new(FixtureAnnotator::builtin());
    let rules: Arc<dyn Annotator> = Arc::new(RuleAnnotator::new());
    let mut reg = Registry::new("annotator");
    reg.register("fixture", fixture.clone());
    reg.register("rules", rules.clone());
    reg.register("auto", Arc::new(ChainAnnotator::new(vec![fixture, rules])));
    reg
}

/// Annotates `prompt` and extracts its object graph.
pub fn parse_prompt(
    annotator: &dyn Annotator,
    prompt: &str,
) -> crate::Result<(Vec<TokenAnnotation>, ObjectGraph)> {
    let tokens = annotator.annotate(prompt)?;
    let graph = extract_object_graph(&tokens)?;
    Ok((tokens, graph))
}
