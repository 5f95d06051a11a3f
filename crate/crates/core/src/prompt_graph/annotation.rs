use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token of a syntactically annotated prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub index: usize,
    pub text: String,
    /// Universal part-of-speech tag (`NOUN`, `PROPN`, `ADJ`, ...).
    pub pos: String,
    /// Index of the syntactic head; equal to `index` for the root.
    pub head: usize,
    /// Dependency label (`amod`, `compound`, `conj`, `ROOT`, ...).
    pub dep: String,
}

impl TokenAnnotation {
    pub fn new(index: usize, text: &str, pos: &str, head: usize, dep: &str) -> Self {
        Self {
            index,
            text: text.to_string(),
            pos: pos.to_string(),
            head,
            dep: dep.to_string(),
        }
    }

    pub fn is_noun(&self) -> bool {
        matches!(self.pos.as_str(), "NOUN" | "PROPN")
    }

    pub fn is_root(&self) -> bool {
        self.head == self.index
    }
}

/// Produces token-level syntactic annotations for a prompt.
///
/// Implementations must be reentrant: the batch runner calls `annotate`
/// from several worker threads at once.
pub trait Annotator: Send + Sync {
    fn name(&self) -> &str;

    /// Version string recorded in run manifests; annotations are only
    /// reproducible for a fixed version.
    fn version(&self) -> &str;

    fn annotate(&self, prompt: &str) -> Result<Vec<TokenAnnotation>>;
}

const SPLIT_PUNCT: &[char] = &[',', '.', ';', ':', '!', '?'];

/// Whitespace tokenizer that detaches trailing and leading punctuation.
pub fn tokenize(prompt: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in prompt.split_whitespace() {
        let mut word = raw;
        let mut lead = Vec::new();
        while let Some(c) = word.chars().next().filter(|c| SPLIT_PUNCT.contains(c)) {
            lead.push(c.to_string());
            word = &word[c.len_utf8()..];
        }
        let mut trail = Vec::new();
        while let Some(c) = word.chars().last().filter(|c| SPLIT_PUNCT.contains(c)) {
            trail.push(c.to_string());
            word = &word[..word.len() - c.len_utf8()];
        }
        out.extend(lead);
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

/// Canonical lookup key for a prompt: lowercase tokens joined by one space.
pub fn prompt_key(prompt: &str) -> String {
    tokenize(prompt)
        .iter()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Checks the structural invariants of an annotation sequence.
pub fn validate(tokens: &[TokenAnnotation]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("annotation sequence is empty"));
    }
    for (i, tok) in tokens.iter().enumerate() {
        if tok.index != i {
            return Err(Error::input(format!(
                "token indices must be contiguous from 0: found {} at position {}",
                tok.index, i
            )));
        }
        if tok.head >= tokens.len() {
            return Err(Error::input(format!(
                "token {} ('{}') has head {} outside the sequence",
                i, tok.text, tok.head
            )));
        }
        if tok.dep.is_empty() {
            return Err(Error::input(format!("token {} has an empty dep label", i)));
        }
        if tok.pos.is_empty() {
            return Err(Error::input(format!("token {} has an empty pos tag", i)));
        }
    }
    Ok(())
}

/// Parses one annotation fixture.
///
/// Format: an optional `# prompt: ...` header line, then one tab-separated
/// record per token: `index  text  pos  head  dep`. Blank lines and other
/// `#` comments are ignored.
pub fn parse_fixture(src: &str) -> Result<(Option<String>, Vec<TokenAnnotation>)> {
    let mut prompt = None;
    let mut tokens = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(p) = rest.trim().strip_prefix("prompt:") {
                prompt = Some(p.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::input(format!(
                "fixture line {}: expected 5 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_idx = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| {
                Error::input(format!("fixture line {}: bad index '{}'", lineno + 1, s))
            })
        };
        tokens.push(TokenAnnotation {
            index: parse_idx(fields[0])?,
            text: fields[1].to_string(),
            pos: fields[2].trim().to_uppercase(),
            head: parse_idx(fields[3])?,
            dep: normalize_dep(fields[4].trim()),
        });
    }
    validate(&tokens)?;
    Ok((prompt, tokens))
}

fn normalize_dep(dep: &str) -> String {
    if dep.eq_ignore_ascii_case("root") {
        "ROOT".to_string()
    } else {
        dep.to_string()
    }
}

/// Renders annotations in the fixture format accepted by [`parse_fixture`].
pub fn render_fixture(prompt: &str, tokens: &[TokenAnnotation]) -> String {
    let mut out = format!("# prompt: {}\n", prompt);
    for t in tokens {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", t.index, t.text, t.pos, t.head, t.dep);
    }
    out
}

/// Annotator backed by recorded annotations.
#[derive(Debug, Clone, Default)]
pub struct FixtureAnnotator {
    records: BTreeMap<String, Vec<TokenAnnotation>>,
}

const BUILTIN_FIXTURES: &[&str] = &[
    include_str!("../../fixtures/annotations/a_purple_crown_and_a_blue_suitcase.tsv"),
    include_str!("../../fixtures/annotations/an_orange_backpack_and_a_purple_car.tsv"),
    include_str!("../../fixtures/annotations/a_red_suitcase_and_a_blue_apple.tsv"),
    include_str!("../../fixtures/annotations/a_purple_modern_camera_and_a_spotted_baby_dog_and_a_sliced_tomato.tsv"),
    include_str!("../../fixtures/annotations/a_red_metal_crown_and_a_white_bear_and_a_wooden_chair.tsv"),
    include_str!("../../fixtures/annotations/an_orange_suitcase_and_a_sliced_strawberry_and_a_baby_mouse.tsv"),
    include_str!("../../fixtures/annotations/a_man_with_glasses_earrings_and_a_red_shirt_with_blue_tie.tsv"),
    include_str!("../../fixtures/annotations/a_red_kitty_cat_sitting_on_a_floor_near_a_dish_and_a_white_towel.tsv"),
    include_str!("../../fixtures/annotations/two_tan_boats_on_dock_next_to_large_white_buildings.tsv"),
    include_str!("../../fixtures/annotations/a_red_metal_crown.tsv"),
    include_str!("../../fixtures/annotations/a_cat_and_a_frog.tsv"),
    include_str!("../../fixtures/annotations/a_cat.tsv"),
    include_str!("../../fixtures/annotations/a_sliced_apple_and_a_purple_camera_and_a_teal_lion.tsv"),
    include_str!("../../fixtures/annotations/a_brown_bear_with_red_hat_and_scarf_and_a_small_stuffed_bear.tsv"),
    include_str!("../../fixtures/annotations/a_gray_crown_and_a_purple_apple.tsv"),
    include_str!("../../fixtures/annotations/a_yellow_guitar.tsv"),
    include_str!("../../fixtures/annotations/a_green_guitar.tsv"),
    include_str!("../../fixtures/annotations/a_frog_on_a_pink_bench.tsv"),
    include_str!("../../fixtures/annotations/a_blue_frog_on_a_pink_bench.tsv"),
    include_str!("../../fixtures/annotations/a_green_backpack_and_a_black_apple.tsv"),
    include_str!("../../fixtures/annotations/a_dog_is_playing_a_leather_drum_on_the_beach.tsv"),
    include_str!("../../fixtures/annotations/an_orange_and_white_cat_sitting_in_the_grass_near_some_yellow_flowers.tsv"),
    include_str!("../../fixtures/annotations/red_roses_in_a_square_green_vase.tsv"),
    include_str!("../../fixtures/annotations/a_room_with_pink_walls_and_white_display_shelves_and_chair.tsv"),
    include_str!("../../fixtures/annotations/a_blue_zebra_and_a_spotted_crown.tsv"),
    include_str!("../../fixtures/annotations/a_living_room_with_white_walls_and_blue_trim.tsv"),
    include_str!("../../fixtures/annotations/a_green_and_white_sign_on_a_black_pole_and_some_buildings.tsv"),
    include_str!("../../fixtures/annotations/a_tesla_company.tsv"),
];

impl FixtureAnnotator {
    pub fn new() -> Self {
        Self::default()
    }

    /// The annotation corpus shipped with the crate.
    pub fn builtin() -> Self {
        let mut out = Self::new();
        for src in BUILTIN_FIXTURES {
            out.insert_fixture(src)
                .expect("builtin annotation fixtures are well-formed");
        }
        out
    }

    /// Loads every `*.tsv` fixture in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut out = Self::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "tsv"))
            .collect();
        paths.sort();
        for path in paths {
            let src = std::fs::read_to_string(&path)?;
            out.insert_fixture(&src).map_err(|e| {
                Error::input(format!("{}: {}", path.display(), e))
            })?;
        }
        Ok(out)
    }

    fn insert_fixture(&mut self, src: &str) -> Result<()> {
        let (prompt, tokens) = parse_fixture(src)?;
        let prompt = prompt.unwrap_or_else(|| {
            tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
        });
        self.insert(&prompt, tokens);
        Ok(())
    }

    pub fn insert(&mut self, prompt: &str, tokens: Vec<TokenAnnotation>) {
        self.records.insert(prompt_key(prompt), tokens);
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, prompt: &str) -> Option<&[TokenAnnotation]> {
        self.records.get(&prompt_key(prompt)).map(Vec::as_slice)
    }
}

impl Annotator for FixtureAnnotator {
    fn name(&self) -> &str {
        "fixture"
    }

    fn version(&self) -> &str {
        "fixture-1"
    }

    fn annotate(&self, prompt: &str) -> Result<Vec<TokenAnnotation>> {
        if prompt.trim().is_empty() {
            return Err(Error::input("prompt is empty"));
        }
        self.lookup(prompt).map(<[_]>::to_vec).ok_or_else(|| {
            Error::config(format!(
                "no recorded annotation for prompt '{}'; add a fixture or use the 'rules' annotator",
                prompt
            ))
        })
    }
}

/// Tries each annotator in order, falling through on configuration errors
/// (a missing fixture) but not on input errors.
pub struct ChainAnnotator {
    name: String,
    version: String,
    inner: Vec<std::sync::Arc<dyn Annotator>>,
}

impl ChainAnnotator {
    pub fn new(inner: Vec<std::sync::Arc<dyn Annotator>>) -> Self {
        let name = inner.iter().map(|a| a.name()).collect::<Vec<_>>().join("+");
        let version = inner
            .iter()
            .map(|a| a.version())
            .collect::<Vec<_>>()
            .join("+");
        Self {
            name,
            version,
            inner,
        }
    }
}

impl Annotator for ChainAnnotator {
    fn name(&self) -> &str {
        &self.name
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn annotate(&self, prompt: &str) -> Result<Vec<TokenAnnotation>> {
        let mut last = Error::config("annotator chain is empty");
        for a in &self.inner {
            match a.annotate(prompt) {
                Ok(t) => return Ok(t),
                Err(e @ Error::Config(_)) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}
