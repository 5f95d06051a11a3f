//! Attention-replacement editing on top of guided generation.
//!
//! The source prompt is sampled with guidance while its conditional
//! attention probabilities are stored per step. The edited prompt is then
//! sampled from the same seed, also with guidance, and during the early part
//! of the trajectory the stored cross-attention of unchanged tokens and the
//! stored self-attention replace the live ones.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionInjection, AttentionStore, CrossInjection, DenoiserAdapter, ForwardOutput, PromptEncoding};
use crate::energy::GuidanceHyperparams;
use crate::error::{Error, Result};
use crate::guidance::{sample_with_controller, GuidedSample, SampleRequest, SamplerConfig, StepController};
use crate::prompt_graph::{parse_prompt, Annotator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    WordSwap,
    AddPhrase,
    Reweight,
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "word_swap" | "swap" => Ok(EditMode::WordSwap),
            "add_phrase" | "add" => Ok(EditMode::AddPhrase),
            "reweight" => Ok(EditMode::Reweight),
            _ => Err(Error::input(format!(
                "unknown edit mode '{}'; expected word_swap, add_phrase or reweight",
                s
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub source_prompt: String,
    pub edited_prompt: String,
    pub mode: EditMode,
    /// Attention multiplier for `reweight_words` (reweight mode).
    pub reweight_factor: f64,
    /// Words of the edited prompt whose attention is scaled (reweight mode).
    pub reweight_words: Vec<String>,
    /// Fraction of steps with replaced cross-attention.
    pub cross_replace: f64,
    /// Fraction of steps with replaced self-attention.
    pub self_replace: f64,
}

impl EditSpec {
    pub fn new(source: &str, edited: &str, mode: EditMode) -> Self {
        Self {
            source_prompt: source.to_string(),
            edited_prompt: edited.to_string(),
            mode,
            reweight_factor: 1.0,
            reweight_words: Vec::new(),
            cross_replace: 0.8,
            self_replace: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cross_replace", self.cross_replace), ("self_replace", self.self_replace)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("{} must be in [0, 1], got {}", name, v)));
            }
        }
        if self.mode == EditMode::Reweight {
            if self.reweight_words.is_empty() {
                return Err(Error::input("reweight mode needs at least one word to reweight"));
            }
            if !(self.reweight_factor >= 0.0) || !self.reweight_factor.is_finite() {
                return Err(Error::input(format!("invalid reweight factor {}", self.reweight_factor)));
            }
        }
        Ok(())
    }
}

/// For each edited word, the source word it is carried over from.
pub fn word_mapping(source: &[String], edited: &[String], mode: EditMode) -> Result<Vec<Option<usize>>> {
    match mode {
        EditMode::WordSwap => {
            if source.len() != edited.len() {
                return Err(Error::input(format!(
                    "word swap needs prompts of equal length ({} vs {} words)",
                    source.len(),
                    edited.len()
                )));
            }
            Ok(source
                .iter()
                .zip(edited)
                .enumerate()
                .map(|(i, (a, b))| a.eq_ignore_ascii_case(b).then_some(i))
                .collect())
        }
        EditMode::AddPhrase | EditMode::Reweight => Ok(lcs_mapping(source, edited)),
    }
}

/// Longest-common-subsequence alignment of two word lists.
fn lcs_mapping(source: &[String], edited: &[String]) -> Vec<Option<usize>> {
    let (n, m) = (source.len(), edited.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if source[i].eq_ignore_ascii_case(&edited[j]) {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let mut out = vec![None; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if source[i].eq_ignore_ascii_case(&edited[j]) {
            out[j] = Some(i);
            i += 1;
            j += 1;
        } else if table[i + 1][j] >= table[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Encoder-column pairs `(edited, source)` for the start token, every
/// carried-over word and the trailing special tokens.
pub fn column_mapping(source: &PromptEncoding, edited: &PromptEncoding, words: &[Option<usize>]) -> Result<Vec<(usize, usize)>> {
    let mut pairs = vec![(0, 0)];
    let mut used = std::collections::BTreeSet::new();
    for (j, src) in words.iter().enumerate() {
        let Some(i) = *src else { continue };
        if !used.insert(i) {
            return Err(Error::input(format!("source word {} mapped twice", i)));
        }
        let (a, b) = (&edited.alignment.groups()[j], &source.alignment.groups()[i]);
        if a.len() != b.len() {
            return Err(Error::input(format!(
                "word '{}' tokenizes differently in the two prompts",
                edited.words[j]
            )));
        }
        pairs.extend(a.iter().copied().zip(b.iter().copied()));
    }
    let tail = |e: &PromptEncoding| (e.alignment.max_column() + 1)..e.embeddings.nrows();
    pairs.extend(tail(edited).zip(tail(source)));
    Ok(pairs)
}

/// Stores the conditional attention of every step.
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    pub steps: Vec<AttentionStore>,
}

impl StepController for AttentionRecorder {
    fn observe(&mut self, _step: usize, _timestep: usize, cond: &ForwardOutput) {
        self.steps.push(cond.store.clone());
    }
}

/// Replays stored source attention into the edited pass.
#[derive(Debug)]
pub struct AttentionReplacer {
    source: Vec<AttentionStore>,
    mapping: Vec<(usize, usize)>,
    reweight: Vec<(usize, f64)>,
    cross_steps: usize,
    self_steps: usize,
}

impl AttentionReplacer {
    pub fn new(
        source: Vec<AttentionStore>,
        mapping: Vec<(usize, usize)>,
        reweight: Vec<(usize, f64)>,
        cross_steps: usize,
        self_steps: usize,
    ) -> Self {
        Self {
            source,
            mapping,
            reweight,
            cross_steps,
            self_steps,
        }
    }
}

impl StepController for AttentionReplacer {
    fn injection(&mut self, step: usize, _timestep: usize) -> Result<Option<AttentionInjection>> {
        let cross = step < self.cross_steps;
        let selfa = step < self.self_steps;
        if !cross && !selfa {
            return Ok(None);
        }
        let store = self
            .source
            .get(step)
            .ok_or_else(|| Error::input(format!("no stored source attention for step {}", step)))?;
        Ok(Some(AttentionInjection {
            cross: cross.then(|| CrossInjection {
                source: store.cross.clone(),
                mapping: self.mapping.clone(),
                reweight: self.reweight.clone(),
            }),
            self_attn: selfa.then(|| store.self_attn.clone()),
        }))
    }
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub source: GuidedSample,
    pub edited: GuidedSample,
}

/// Number of leading steps covered by `fraction` of `total`.
pub fn replace_steps(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).floor() as usize).min(total)
}

pub fn edit(
    adapter: &dyn DenoiserAdapter,
    annotator: &dyn Annotator,
    spec: &EditSpec,
    sampler: &SamplerConfig,
    hyper: &GuidanceHyperparams,
) -> Result<EditOutput> {
    spec.validate()?;
    if !adapter.supports_injection() {
        return Err(Error::config(format!(
            "adapter '{}' cannot store or inject attention",
            adapter.name()
        )));
    }
    let (src_tokens, src_graph) = parse_prompt(annotator, &spec.source_prompt)?;
    let (edit_tokens, edit_graph) = parse_prompt(annotator, &spec.edited_prompt)?;
    let src_words: Vec<String> = src_tokens.iter().map(|t| t.text.clone()).collect();
    let edit_words: Vec<String> = edit_tokens.iter().map(|t| t.text.clone()).collect();

    let words = word_mapping(&src_words, &edit_words, spec.mode)?;
    let src_enc = adapter.encode_prompt(&src_words)?;
    let edit_enc = adapter.encode_prompt(&edit_words)?;
    let mapping = column_mapping(&src_enc, &edit_enc, &words)?;
    let mut reweight = Vec::new();
    if spec.mode == EditMode::Reweight {
        for target in &spec.reweight_words {
            let hits: Vec<usize> = edit_words
                .iter()
                .enumerate()
                .filter(|(_, w)| w.eq_ignore_ascii_case(target))
                .map(|(j, _)| j)
                .collect();
            if hits.is_empty() {
                return Err(Error::input(format!("reweight word '{}' is not in the edited prompt", target)));
            }
            for j in hits {
                reweight.extend(edit_enc.alignment.groups()[j].iter().map(|&c| (c, spec.reweight_factor)));
            }
        }
    }

    let mut recorder = AttentionRecorder::default();
    let source = sample_with_controller(
        adapter,
        &SampleRequest {
            words: &src_words,
            graph: &src_graph,
            external_words: &[],
            sampler,
            hyper,
        },
        &mut recorder,
    )?;
    let mut replacer = AttentionReplacer::new(
        recorder.steps,
        mapping,
        reweight,
        replace_steps(spec.cross_replace, sampler.total_steps),
        replace_steps(spec.self_replace, sampler.total_steps),
    );
    let edited = sample_with_controller(
        adapter,
        &SampleRequest {
            words: &edit_words,
            graph: &edit_graph,
            external_words: &[],
            sampler,
            hyper,
        },
        &mut replacer,
    )?;
    Ok(EditOutput { source, edited })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn swap_mapping_is_positional() {
        let m = word_mapping(&w("a yellow guitar"), &w("a green guitar"), EditMode::WordSwap).unwrap();
        assert_eq!(m, vec![Some(0), None, Some(2)]);
        assert!(word_mapping(&w("a guitar"), &w("a green guitar"), EditMode::WordSwap).is_err());
    }

    #[test]
    fn add_phrase_uses_common_subsequence() {
        let m = word_mapping(
            &w("a frog on a pink bench"),
            &w("a blue frog on a pink bench"),
            EditMode::AddPhrase,
        )
        .unwrap();
        assert_eq!(m, vec![Some(0), None, Some(1), Some(2), Some(3), Some(4), Some(5)]);
    }

    #[test]
    fn replace_step_counts() {
        assert_eq!(replace_steps(0.8, 50), 40);
        assert_eq!(replace_steps(0.4, 50), 20);
        assert_eq!(replace_steps(0.0, 50), 0);
        assert_eq!(replace_steps(1.0, 7), 7);
    }

    #[test]
    fn spec_validation() {
        let mut s = EditSpec::new("a cat", "a cat", EditMode::Reweight);
        assert!(s.validate().is_err());
        s.reweight_words = vec!["cat".into()];
        assert!(s.validate().is_ok());
        s.cross_replace = 1.5;
        assert!(s.validate().is_err());
        assert_eq!("add-phrase".parse::<EditMode>().unwrap(), EditMode::AddPhrase);
    }
}
