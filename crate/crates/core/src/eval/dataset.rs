use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_graph::ObjectGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    AnimalAnimal,
    AnimalObject,
    ObjectObject,
    Dvmp,
    Abc6k,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::AnimalAnimal,
        Category::AnimalObject,
        Category::ObjectObject,
        Category::Dvmp,
        Category::Abc6k,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::AnimalAnimal => "animal-animal",
            Category::AnimalObject => "animal-object",
            Category::ObjectObject => "object-object",
            Category::Dvmp => "dvmp",
            Category::Abc6k => "abc6k",
        }
    }

    /// Intensity weight tuned for this benchmark.
    pub fn default_lambda(self) -> f64 {
        match self {
            Category::AnimalObject => 0.25,
            _ => 0.5,
        }
    }

    /// Guesses the category from a dataset file name such as `animal_object.txt`.
    pub fn from_path(path: &Path) -> Option<Self> {
        let stem = path.file_stem()?.to_str()?.to_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|c| stem.contains(c.as_str()))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| {
                Error::input(format!(
                    "unknown category '{}'; expected one of animal-animal, animal-object, object-object, dvmp, abc6k",
                    s
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub text: String,
    pub category: Category,
}

/// Reads one prompt per non-empty line; lines starting with `#` are comments.
pub fn parse_dataset(text: &str, category: Category) -> Vec<BenchmarkPrompt> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| BenchmarkPrompt {
            text: l.to_string(),
            category,
        })
        .collect()
}

pub fn load_dataset(path: &Path, category: Option<Category>) -> Result<Vec<BenchmarkPrompt>> {
    let category = category.or_else(|| Category::from_path(path)).ok_or_else(|| {
        Error::input(format!(
            "cannot infer the benchmark category of {}; pass it explicitly",
            path.display()
        ))
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read dataset {}: {}", path.display(), e)))?;
    Ok(parse_dataset(&text, category))
}

fn article(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// One phrase per object: article, modifiers in prompt order, object word.
pub fn decompose_subprompts(words: &[String], graph: &ObjectGraph) -> Result<Vec<String>> {
    if graph.is_empty() {
        return Err(Error::input("cannot build sub-prompts for a prompt without objects"));
    }
    graph
        .objects
        .iter()
        .map(|&s| {
            let mut idx: Vec<usize> = graph.modifiers_of(s).iter().copied().filter(|&m| m < words.len()).collect();
            idx.push(s);
            idx.sort_unstable();
            if idx.iter().any(|&i| i >= words.len()) {
                return Err(Error::input(format!("object {} outside the prompt", s)));
            }
            let body = idx.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");
            Ok(format!("{} {}", article(&body), body))
        })
        .collect()
}

pub const ANIMALS: &[&str] = &[
    "cat", "dog", "bird", "bear", "lion", "horse", "elephant", "monkey", "frog", "turtle", "rabbit", "mouse",
];
pub const OBJECTS: &[&str] = &[
    "backpack", "glasses", "crown", "suitcase", "chair", "balloon", "bow", "car", "bowl", "bench", "clock", "camera",
];
pub const COLORS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray",
];
const MATERIALS: &[&str] = &["wooden", "metal", "plastic", "leather", "glass", "fluffy"];

fn with_article(phrase: &str) -> String {
    format!("{} {}", article(phrase), phrase)
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// `a {animal} and a {animal}` over all unordered pairs.
pub fn animal_animal_prompts() -> Vec<BenchmarkPrompt> {
    pairs(ANIMALS.len())
        .map(|(i, j)| BenchmarkPrompt {
            text: format!("{} and {}", with_article(ANIMALS[i]), with_article(ANIMALS[j])),
            category: Category::AnimalAnimal,
        })
        .collect()
}

/// `a {animal} with a {object}` and `a {animal} and a {color} {object}`.
pub fn animal_object_prompts(seed: u64) -> Vec<BenchmarkPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in ANIMALS {
        for (k, o) in OBJECTS.iter().enumerate() {
            let text = if k % 2 == 0 {
                format!("{} with {}", with_article(a), with_article(o))
            } else {
                let c = COLORS.choose(&mut rng).expect("colors");
                format!("{} and {}", with_article(a), with_article(&format!("{} {}", c, o)))
            };
            out.push(BenchmarkPrompt {
                text,
                category: Category::AnimalObject,
            });
        }
    }
    out
}

/// `a {color} {object} and a {color} {object}` over all unordered object pairs.
pub fn object_object_prompts(seed: u64) -> Vec<BenchmarkPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs(OBJECTS.len())
        .map(|(i, j)| {
            let c1 = COLORS.choose(&mut rng).expect("colors");
            let c2 = COLORS.choose(&mut rng).expect("colors");
            BenchmarkPrompt {
                text: format!(
                    "{} and {}",
                    with_article(&format!("{} {}", c1, OBJECTS[i])),
                    with_article(&format!("{} {}", c2, OBJECTS[j]))
                ),
                category: Category::ObjectObject,
            }
        })
        .collect()
}

/// Random mixtures of two to four objects, each with zero to two modifiers
/// (color and/or material).
pub fn dvmp_prompts(count: usize, seed: u64) -> Vec<BenchmarkPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nouns: Vec<&str> = ANIMALS.iter().chain(OBJECTS).copied().collect();
    (0..count)
        .map(|_| {
            let n = [2, 3, 4].choose(&mut rng).copied().expect("counts");
            let chosen: Vec<&str> = nouns.choose_multiple(&mut rng, n).copied().collect();
            let phrases: Vec<String> = chosen
                .iter()
                .map(|noun| {
                    let mut mods = Vec::new();
                    let k = [0, 1, 1, 2].choose(&mut rng).copied().expect("counts");
                    if k == 2 {
                        mods.push(*MATERIALS.choose(&mut rng).expect("materials"));
                    }
                    if k >= 1 {
                        mods.insert(0, *COLORS.choose(&mut rng).expect("colors"));
                    }
                    mods.push(noun);
                    with_article(&mods.join(" "))
                })
                .collect();
            BenchmarkPrompt {
                text: phrases.join(" and "),
                category: Category::Dvmp,
            }
        })
        .collect()
}

/// Built-in prompt set for a category.
pub fn template_prompts(category: Category, seed: u64) -> Result<Vec<BenchmarkPrompt>> {
    match category {
        Category::AnimalAnimal => Ok(animal_animal_prompts()),
        Category::AnimalObject => Ok(animal_object_prompts(seed)),
        Category::ObjectObject => Ok(object_object_prompts(seed)),
        Category::Dvmp => Ok(dvmp_prompts(200, seed)),
        Category::Abc6k => Err(Error::input("abc6k has no template generator; supply a dataset file")),
    }
}
