use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::annotation::{validate, TokenAnnotation};
use crate::error::{Error, Result};

/// Dependency labels that attach a modifier to its object.
pub const MODIFIER_DEPS: &[&str] = &["amod", "nmod", "compound", "npadvmod", "conj"];

/// Object tokens of a prompt and the modifier set of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectGraph {
    /// Object token indices, ascending.
    pub objects: Vec<usize>,
    /// Modifier indices per object, ascending. Every object has an entry.
    pub modifiers: BTreeMap<usize, Vec<usize>>,
    /// Number of prompt tokens taking part in attention.
    pub token_count: usize,
    /// Externally appended tokens; never modifiers of any object.
    #[serde(default)]
    pub externals: Vec<usize>,
    /// Set when no object was found. Guidance is a no-op for such graphs.
    #[serde(default)]
    pub degraded: bool,
}

impl ObjectGraph {
    pub fn empty(token_count: usize) -> Self {
        Self {
            objects: Vec::new(),
            modifiers: BTreeMap::new(),
            token_count,
            externals: Vec::new(),
            degraded: true,
        }
    }

    /// Builds a graph from explicit object and modifier lists, checking the
    /// disjointness and range invariants.
    pub fn from_parts(
        token_count: usize,
        modifiers: impl IntoIterator<Item = (usize, Vec<usize>)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (s, mut m) in modifiers {
            m.sort_unstable();
            m.dedup();
            if map.insert(s, m).is_some() {
                return Err(Error::input(format!("object {} listed twice", s)));
            }
        }
        let objects: Vec<usize> = map.keys().copied().collect();
        let graph = Self {
            degraded: objects.is_empty(),
            objects,
            modifiers: map,
            token_count,
            externals: Vec::new(),
        };
        graph.check()?;
        Ok(graph)
    }

    /// The same graph over a prompt extended by `n` trailing external tokens.
    pub fn with_externals(&self, n: usize) -> Result<Self> {
        let mut out = self.clone();
        out.externals.extend(self.token_count..self.token_count + n);
        out.token_count += n;
        out.check()?;
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn modifiers_of(&self, s: usize) -> &[usize] {
        self.modifiers.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_object(&self, idx: usize) -> bool {
        self.objects.binary_search(&idx).is_ok()
    }

    /// Verifies range and disjointness invariants.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &s in &self.objects {
            if s >= self.token_count {
                return Err(Error::input(format!(
                    "object {} out of range (N={})",
                    s, self.token_count
                )));
            }
            seen.insert(s);
        }
        for (s, ms) in &self.modifiers {
            if !self.is_object(*s) {
                return Err(Error::input(format!("modifier set for non-object {}", s)));
            }
            for &m in ms {
                if m >= self.token_count {
                    return Err(Error::input(format!(
                        "modifier {} out of range (N={})",
                        m, self.token_count
                    )));
                }
                if !seen.insert(m) {
                    return Err(Error::input(format!(
                        "token {} appears in more than one object/modifier role",
                        m
                    )));
                }
            }
        }
        for &e in &self.externals {
            if e >= self.token_count || seen.contains(&e) {
                return Err(Error::input(format!("external token {} invalid", e)));
            }
        }
        Ok(())
    }
}

/// Extracts the object-oriented structure from annotated tokens.
///
/// Objects are NOUN/PROPN tokens that do not themselves modify another noun.
/// Each object collects the tokens reachable through modifier dependencies;
/// a `conj` arc to another noun is coordination, not modification, so it is
/// not followed. Returns a degraded empty graph when no object is found.
pub fn extract_object_graph(tokens: &[TokenAnnotation]) -> Result<ObjectGraph> {
    validate(tokens)?;
    let n = tokens.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in tokens {
        if !t.is_root() {
            children[t.head].push(t.index);
        }
    }

    let is_mod_dep = |t: &TokenAnnotation| MODIFIER_DEPS.contains(&t.dep.as_str());
    let noun_modifies_noun = |t: &TokenAnnotation| {
        t.is_noun()
            && !t.is_root()
            && t.dep != "conj"
            && is_mod_dep(t)
            && tokens[t.head].is_noun()
    };

    let objects: Vec<usize> = tokens
        .iter()
        .filter(|t| t.is_noun() && !noun_modifies_noun(t))
        .map(|t| t.index)
        .collect();

    if objects.is_empty() {
        return Ok(ObjectGraph::empty(n));
    }

    let object_set: BTreeSet<usize> = objects.iter().copied().collect();
    let mut modifiers = BTreeMap::new();
    for &s in &objects {
        let mut found = BTreeSet::new();
        let mut stack = vec![s];
        while let Some(cur) = stack.pop() {
            for &c in &children[cur] {
                let child = &tokens[c];
                if !is_mod_dep(child) || object_set.contains(&c) {
                    continue;
                }
                if child.dep == "conj" && child.is_noun() {
                    continue;
                }
                if found.insert(c) {
                    stack.push(c);
                }
            }
        }
        modifiers.insert(s, found.into_iter().collect::<Vec<_>>());
    }

    let graph = ObjectGraph {
        objects,
        modifiers,
        token_count: n,
        externals: Vec::new(),
        degraded: false,
    };
    graph.check()?;
    Ok(graph)
}

/// Extends a graph with `n` externally appended tokens.
///
/// `tokens` annotates the extended prompt; the appended words must occupy its
/// last `n` positions. Objects and modifier sets are carried over unchanged.
pub fn append_external_modifiers(
    graph: &ObjectGraph,
    tokens: &[TokenAnnotation],
    n: usize,
) -> Result<ObjectGraph> {
    if n == 0 {
        return Err(Error::input("no external modifiers to append"));
    }
    if tokens.len() != graph.token_count + n {
        return Err(Error::input(format!(
            "extended prompt has {} tokens, expected {} + {}",
            tokens.len(),
            graph.token_count,
            n
        )));
    }
    graph.with_externals(n)
}

/// Human-readable export of a parsed graph, used by the `parse` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub prompt: String,
    pub tokens: Vec<String>,
    pub objects: Vec<ObjectRecord>,
    pub externals: Vec<TokenRef>,
    pub token_count: usize,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub index: usize,
    pub text: String,
    pub modifiers: Vec<TokenRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRef {
    pub index: usize,
    pub text: String,
}

impl GraphRecord {
    pub fn new(prompt: &str, words: &[String], graph: &ObjectGraph) -> Self {
        let word = |i: usize| words.get(i).cloned().unwrap_or_default();
        let tref = |i: usize| TokenRef {
            index: i,
            text: word(i),
        };
        Self {
            prompt: prompt.to_string(),
            tokens: words.to_vec(),
            objects: graph
                .objects
                .iter()
                .map(|&s| ObjectRecord {
                    index: s,
                    text: word(s),
                    modifiers: graph.modifiers_of(s).iter().map(|&m| tref(m)).collect(),
                })
                .collect(),
            externals: graph.externals.iter().map(|&e| tref(e)).collect(),
            token_count: graph.token_count,
            degraded: graph.degraded,
        }
    }

    /// `S={crown,suitcase}, M(crown)={purple}, M(suitcase)={blue}`
    pub fn summary(&self) -> String {
        let objs: Vec<&str> = self.objects.iter().map(|o| o.text.as_str()).collect();
        let mut out = format!("S={{{}}}", objs.join(","));
        for o in &self.objects {
            let ms: Vec<&str> = o.modifiers.iter().map(|m| m.text.as_str()).collect();
            out.push_str(&format!(", M({})={{{}}}", o.text, ms.join(",")));
        }
        if !self.externals.is_empty() {
            let es: Vec<&str> = self.externals.iter().map(|m| m.text.as_str()).collect();
            out.push_str(&format!(", externals={{{}}}", es.join(",")));
        }
        if self.degraded {
            out.push_str(" (degraded: no objects)");
        }
        out
    }
}
