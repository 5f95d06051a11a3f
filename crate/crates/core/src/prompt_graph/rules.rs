use super::annotation::{tokenize, Annotator, TokenAnnotation};
use crate::error::{Error, Result};

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "this", "that", "these", "those", "each", "every", "another", "any",
    "many", "several", "his", "her", "their", "its", "my", "your", "our",
];
const NUMBERS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but"];
const PREPOSITIONS: &[&str] = &[
    "with", "on", "in", "near", "at", "under", "over", "behind", "beside", "by", "of", "to",
    "from", "into", "inside", "above", "below", "across", "along", "against", "around", "onto",
    "atop", "beneath", "between", "among", "for", "without",
];
const AUXILIARIES: &[&str] = &["is", "are", "was", "were", "be", "being", "been"];
const ADJECTIVES: &[&str] = &[
    // colors
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "gray", "grey",
    "black", "white", "teal", "tan", "gold", "golden", "silver", "beige", "cyan", "magenta",
    "violet", "maroon", "navy", "turquoise",
    // materials and textures
    "wooden", "metallic", "plastic", "glass", "spotted", "striped", "sliced", "fluffy", "furry",
    "shiny", "stuffed", "checkered", "wet", "dry", "soft", "hard", "rusty",
    // size, shape, age
    "small", "large", "big", "little", "tiny", "huge", "tall", "short", "long", "square",
    "round", "modern", "old", "new", "young", "ancient", "cute", "happy", "sad", "empty", "full",
];

/// Lexicon-driven dependency annotator for compositional prompts.
///
/// Handles the phrase shapes common in attribute-binding benchmarks:
/// determiner + adjectives/compound nouns + head noun, coordinated noun
/// phrases, coordinated adjectives ("orange and white cat"), prepositional
/// attachments, and simple verb clauses. It is deterministic and reentrant.
#[derive(Debug, Clone, Default)]
pub struct RuleAnnotator;

impl RuleAnnotator {
    pub fn new() -> Self {
        Self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Det,
    Num,
    Cconj,
    Adp,
    Aux,
    Adj,
    Adv,
    Verb,
    Noun,
    Propn,
    Punct,
}

impl Tag {
    fn as_str(self) -> &'static str {
        match self {
            Tag::Det => "DET",
            Tag::Num => "NUM",
            Tag::Cconj => "CCONJ",
            Tag::Adp => "ADP",
            Tag::Aux => "AUX",
            Tag::Adj => "ADJ",
            Tag::Adv => "ADV",
            Tag::Verb => "VERB",
            Tag::Noun => "NOUN",
            Tag::Propn => "PROPN",
            Tag::Punct => "PUNCT",
        }
    }

    fn is_nominal(self) -> bool {
        matches!(self, Tag::Noun | Tag::Propn)
    }
}

fn lexical_tag(word: &str, index: usize) -> Option<Tag> {
    let lower = word.to_lowercase();
    let w = lower.as_str();
    if word.chars().all(|c| c.is_ascii_punctuation()) {
        return Some(Tag::Punct);
    }
    if DETERMINERS.contains(&w) {
        Some(Tag::Det)
    } else if NUMBERS.contains(&w) || w.chars().all(|c| c.is_ascii_digit()) {
        Some(Tag::Num)
    } else if CONJUNCTIONS.contains(&w) {
        Some(Tag::Cconj)
    } else if PREPOSITIONS.contains(&w) {
        Some(Tag::Adp)
    } else if AUXILIARIES.contains(&w) {
        Some(Tag::Aux)
    } else if ADJECTIVES.contains(&w) {
        Some(Tag::Adj)
    } else if index > 0 && word.chars().next().is_some_and(char::is_uppercase) {
        Some(Tag::Propn)
    } else {
        None
    }
}

fn tag_tokens(words: &[String]) -> Vec<Tag> {
    let lexical: Vec<Option<Tag>> = words
        .iter()
        .enumerate()
        .map(|(i, w)| lexical_tag(w, i))
        .collect();
    let mut tags = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let next = lexical.get(i + 1).copied().flatten();
        let next_is_end = i + 1 >= words.len();
        let tag = match lexical[i] {
            Some(t) => t,
            None if w.to_lowercase() == "next"
                && words.get(i + 1).is_some_and(|n| n.eq_ignore_ascii_case("to")) =>
            {
                Tag::Adv
            }
            None if w.to_lowercase().ends_with("ing")
                && w.len() > 4
                && (next_is_end
                    || matches!(
                        next,
                        Some(Tag::Det | Tag::Adp | Tag::Punct | Tag::Cconj | Tag::Num)
                    )) =>
            {
                Tag::Verb
            }
            None => Tag::Noun,
        };
        tags.push(tag);
    }
    tags
}

/// A noun phrase: token span and its head.
struct Phrase {
    start: usize,
    end: usize,
    head: usize,
}

fn chunk_phrases(tags: &[Tag], words: &[String]) -> Vec<Phrase> {
    let in_np = |t: Tag| matches!(t, Tag::Det | Tag::Num | Tag::Adj | Tag::Noun | Tag::Propn);
    let mut phrases = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if !in_np(tags[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut seen_nominal = false;
        let mut j = i;
        while j < tags.len() {
            let t = tags[j];
            if in_np(t) {
                if t == Tag::Det && j > start {
                    break;
                }
                if !t.is_nominal() && seen_nominal {
                    break;
                }
                seen_nominal |= t.is_nominal();
                j += 1;
                continue;
            }
            // adjective coordination inside the phrase: ADJ (and|,) ADJ
            let joins_adjectives = (t == Tag::Cconj || words[j] == ",")
                && j > start
                && tags[j - 1] == Tag::Adj
                && tags.get(j + 1) == Some(&Tag::Adj);
            if joins_adjectives && !seen_nominal {
                j += 1;
                continue;
            }
            break;
        }
        let end = j;
        let head = (start..end)
            .rev()
            .find(|&k| tags[k].is_nominal())
            .unwrap_or(end - 1);
        phrases.push(Phrase { start, end, head });
        i = end;
    }
    phrases
}

impl Annotator for RuleAnnotator {
    fn name(&self) -> &str {
        "rules"
    }

    fn version(&self) -> &str {
        "rules-1"
    }

    fn annotate(&self, prompt: &str) -> Result<Vec<TokenAnnotation>> {
        let words = tokenize(prompt);
        if words.is_empty() {
            return Err(Error::input("prompt is empty"));
        }
        let tags = tag_tokens(&words);
        let phrases = chunk_phrases(&tags, &words);
        let n = words.len();
        let mut head: Vec<Option<usize>> = vec![None; n];
        let mut dep: Vec<&'static str> = vec!["dep"; n];

        // phrase-internal arcs
        let mut phrase_of = vec![None; n];
        for (pi, p) in phrases.iter().enumerate() {
            let mut coord_first: Option<usize> = None;
            for k in p.start..p.end {
                phrase_of[k] = Some(pi);
                if k == p.head {
                    continue;
                }
                let (h, d) = match tags[k] {
                    Tag::Det => (p.head, "det"),
                    Tag::Num => (p.head, "nummod"),
                    Tag::Noun | Tag::Propn => (p.head, "compound"),
                    Tag::Adj => {
                        let coordinated = k > p.start
                            && (tags[k - 1] == Tag::Cconj || words[k - 1] == ",");
                        match (coordinated, coord_first) {
                            (true, Some(first)) => (first, "conj"),
                            _ => {
                                coord_first = Some(k);
                                (p.head, "amod")
                            }
                        }
                    }
                    Tag::Cconj => (coord_first.unwrap_or(p.head), "cc"),
                    Tag::Punct => (coord_first.unwrap_or(p.head), "punct"),
                    _ => (p.head, "dep"),
                };
                head[k] = Some(h);
                dep[k] = d;
            }
        }

        // clause-level arcs
        let mut root: Option<usize> = None;
        let mut last_head: Option<usize> = None;
        let mut last_verb: Option<usize> = None;
        let mut verb_has_object = false;
        let mut pending_prep: Option<usize> = None;
        let mut pending_aux: Vec<usize> = Vec::new();
        let mut coordinating = false;
        let mut k = 0;
        while k < n {
            if let Some(pi) = phrase_of[k] {
                let p = &phrases[pi];
                let h = p.head;
                let verb_is_latest = match (last_verb, last_head) {
                    (Some(v), Some(l)) => v > l,
                    (Some(_), None) => true,
                    _ => false,
                };
                if let Some(prep) = pending_prep.take() {
                    head[h] = Some(prep);
                    dep[h] = "pobj";
                } else if coordinating && last_head.is_some() {
                    head[h] = last_head;
                    dep[h] = "conj";
                } else if verb_is_latest && !verb_has_object {
                    head[h] = last_verb;
                    dep[h] = "dobj";
                    verb_has_object = true;
                } else if root.is_none() {
                    root = Some(h);
                    head[h] = Some(h);
                    dep[h] = "ROOT";
                } else {
                    head[h] = root;
                    dep[h] = "dep";
                }
                coordinating = false;
                last_head = Some(h);
                k = p.end;
                continue;
            }
            match tags[k] {
                Tag::Adp => {
                    let attach = if k > 0 && tags[k - 1] == Tag::Adv {
                        Some(k - 1)
                    } else {
                        match (last_verb, last_head) {
                            (Some(v), Some(l)) => Some(v.max(l)),
                            (v, l) => v.or(l),
                        }
                    };
                    if let Some(a) = attach {
                        head[k] = Some(a);
                        dep[k] = "prep";
                    }
                    pending_prep = Some(k);
                }
                Tag::Cconj => {
                    if let Some(l) = last_head {
                        head[k] = Some(l);
                        dep[k] = "cc";
                    }
                    coordinating = true;
                }
                Tag::Punct => {
                    if words[k] == "," {
                        if let Some(l) = last_head {
                            head[k] = Some(l);
                        }
                        coordinating = true;
                    } else {
                        head[k] = root.or(last_head);
                    }
                    dep[k] = "punct";
                }
                Tag::Adv => {
                    if let Some(l) = last_head {
                        head[k] = Some(l);
                        dep[k] = "advmod";
                    }
                }
                Tag::Aux => pending_aux.push(k),
                Tag::Verb => {
                    if !pending_aux.is_empty() || root.is_none() {
                        // finite clause: the verb becomes the root
                        if let Some(old) = root {
                            head[old] = Some(k);
                            dep[old] = "nsubj";
                            for t in 0..n {
                                if head[t] == Some(old) && dep[t] == "dep" && t != old {
                                    head[t] = Some(k);
                                }
                            }
                        }
                        for a in pending_aux.drain(..) {
                            head[a] = Some(k);
                            dep[a] = "aux";
                        }
                        root = Some(k);
                        head[k] = Some(k);
                        dep[k] = "ROOT";
                    } else if let Some(l) = last_head {
                        head[k] = Some(l);
                        dep[k] = "acl";
                    }
                    last_verb = Some(k);
                    verb_has_object = false;
                    coordinating = false;
                }
                _ => {}
            }
            k += 1;
        }

        let root = root.unwrap_or(0);
        head[root] = Some(root);
        dep[root] = "ROOT";
        Ok((0..n)
            .map(|i| TokenAnnotation {
                index: i,
                text: words[i].clone(),
                pos: tags[i].as_str().to_string(),
                head: head[i].unwrap_or(root),
                dep: dep[i].to_string(),
            })
            .collect())
    }
}
