use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Joint image/text embedding model. Embeddings must be unit-normalized.
pub trait SimilarityScorer: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Image captioning model with deterministic decoding.
pub trait Captioner: Send + Sync {
    fn name(&self) -> &str;
    fn caption(&self, image: &RgbImage, count: usize) -> Result<Vec<String>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("embedding widths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero embedding".into()));
    }
    Ok(dot / (na * nb))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn full_similarity(image: &RgbImage, prompt: &str, scorer: &dyn SimilarityScorer) -> Result<f64> {
    cosine(&scorer.embed_image(image)?, &scorer.embed_text(prompt)?)
}

pub fn min_similarity(image: &RgbImage, subprompts: &[String], scorer: &dyn SimilarityScorer) -> Result<f64> {
    if subprompts.is_empty() {
        return Err(Error::input("min similarity needs at least one sub-prompt"));
    }
    let img = scorer.embed_image(image)?;
    subprompts
        .iter()
        .map(|p| cosine(&img, &scorer.embed_text(p)?))
        .try_fold(f64::INFINITY, |acc, s| Ok(acc.min(s?)))
}

/// Mean text-text cosine between the prompt and each generated caption.
pub fn text_caption_similarity(
    image: &RgbImage,
    prompt: &str,
    captioner: &dyn Captioner,
    scorer: &dyn SimilarityScorer,
    captions: usize,
) -> Result<f64> {
    let caps = captioner.caption(image, captions.max(1))?;
    if caps.is_empty() {
        return Err(Error::Adapter(format!("captioner '{}' returned no captions", captioner.name())));
    }
    let p = scorer.embed_text(prompt)?;
    let mut sum = 0.0;
    for c in &caps {
        sum += cosine(&p, &scorer.embed_text(c)?)?;
    }
    Ok(sum / caps.len() as f64)
}

/// Named reference colors shared by the palette scorer and captioner.
const PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [200, 30, 30]),
    ("orange", [240, 140, 20]),
    ("yellow", [230, 220, 40]),
    ("green", [40, 160, 50]),
    ("blue", [40, 70, 200]),
    ("purple", [130, 50, 170]),
    ("pink", [240, 150, 190]),
    ("brown", [120, 75, 40]),
    ("black", [20, 20, 20]),
    ("white", [235, 235, 235]),
    ("gray", [128, 128, 128]),
];

const HASH_DIMS: usize = 32;

fn palette_histogram(image: &RgbImage) -> Vec<f64> {
    let mut hist = vec![0.0; PALETTE.len()];
    for px in image.pixels() {
        let nearest = PALETTE
            .iter()
            .enumerate()
            .min_by_key(|(_, (_, c))| {
                c.iter()
                    .zip(px.0)
                    .map(|(&a, b)| (a as i32 - b as i32).pow(2))
                    .sum::<i32>()
            })
            .map(|(i, _)| i)
            .expect("palette is non-empty");
        hist[nearest] += 1.0;
    }
    let total = (image.width() * image.height()).max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}

fn word_bucket(word: &str) -> usize {
    let d = Sha256::digest(word.as_bytes());
    (u16::from_le_bytes([d[0], d[1]]) as usize) % HASH_DIMS
}

/// Deterministic stand-in for a CLIP-style model.
///
/// Images embed as a histogram over named colors; text embeds color words on
/// the same axes and every other word into hashed buckets, plus a shared bias
/// axis so that unrelated pairs still score a small positive value.
#[derive(Debug, Default, Clone)]
pub struct PaletteScorer;

impl SimilarityScorer for PaletteScorer {
    fn name(&self) -> &str {
        "palette"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let mut v = palette_histogram(image);
        v.extend(std::iter::repeat_n(0.0, HASH_DIMS));
        v.push(0.5);
        Ok(unit(v))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; PALETTE.len() + HASH_DIMS + 1];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let w = word.to_lowercase();
            match PALETTE.iter().position(|(name, _)| *name == w) {
                Some(i) => v[i] += 1.0,
                None if matches!(w.as_str(), "a" | "an" | "the" | "and" | "with") => {}
                None => v[PALETTE.len() + word_bucket(&w)] += 0.5,
            }
        }
        *v.last_mut().expect("bias axis") = 0.5;
        Ok(unit(v))
    }
}

/// Captions an image by its dominant named colors.
#[derive(Debug, Default, Clone)]
pub struct PaletteCaptioner;

impl Captioner for PaletteCaptioner {
    fn name(&self) -> &str {
        "palette"
    }

    fn caption(&self, image: &RgbImage, count: usize) -> Result<Vec<String>> {
        let hist = palette_histogram(image);
        let mut order: Vec<usize> = (0..hist.len()).collect();
        order.sort_by(|&a, &b| hist[b].total_cmp(&hist[a]).then(a.cmp(&b)));
        Ok((0..count)
            .map(|k| {
                let first = PALETTE[order[k % order.len()]].0;
                let second = PALETTE[order[(k + 1) % order.len()]].0;
                format!("a {} and {} picture", first, second)
            })
            .collect())
    }
}

/// Key of an image in recorded fixtures: SHA-256 of its raw RGB bytes.
pub fn image_key(image: &RgbImage) -> String {
    hex::encode(Sha256::digest(image.as_raw()))
}

/// Embeddings and captions recorded from real models, keyed by text or by
/// [`image_key`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RecordedModels {
    #[serde(default)]
    pub texts: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub images: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub captions: HashMap<String, Vec<String>>,
}

impl RecordedModels {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn missing(kind: &str, key: &str) -> Error {
        Error::config(format!("no recorded {} for '{}'", kind, key))
    }
}

impl SimilarityScorer for RecordedModels {
    fn name(&self) -> &str {
        "recorded"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let key = image_key(image);
        self.images.get(&key).cloned().ok_or_else(|| Self::missing("image embedding", &key))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.texts.get(text).cloned().ok_or_else(|| Self::missing("text embedding", text))
    }
}

impl Captioner for RecordedModels {
    fn name(&self) -> &str {
        "recorded"
    }

    fn caption(&self, image: &RgbImage, count: usize) -> Result<Vec<String>> {
        let key = image_key(image);
        let caps = self.captions.get(&key).ok_or_else(|| Self::missing("captions", &key))?;
        Ok(caps.iter().take(count.max(1)).cloned().collect())
    }
}

pub fn scorer_registry() -> Registry<dyn SimilarityScorer> {
    let mut r: Registry<dyn SimilarityScorer> = Registry::new("scorer");
    r.register("palette", Arc::new(PaletteScorer));
    r
}

pub fn captioner_registry() -> Registry<dyn Captioner> {
    let mut r: Registry<dyn Captioner> = Registry::new("captioner");
    r.register("palette", Arc::new(PaletteCaptioner));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(4, 4, Rgb(rgb))
    }

    fn recorded() -> (RecordedModels, RgbImage) {
        let img = solid([1, 2, 3]);
        let mut m = RecordedModels::default();
        m.images.insert(image_key(&img), vec![1.0, 0.0]);
        m.texts.insert("p".into(), vec![1.0, 0.0]);
        m.texts.insert("q".into(), vec![0.0, 1.0]);
        m.texts.insert("c1".into(), vec![0.8, 0.6]);
        m.texts.insert("c2".into(), vec![0.6, 0.8]);
        m.captions.insert(image_key(&img), vec!["c1".into(), "c2".into()]);
        (m, img)
    }

    #[test]
    fn full_similarity_of_identical_and_orthogonal_embeddings() {
        let (m, img) = recorded();
        assert_eq!(full_similarity(&img, "p", &m).unwrap(), 1.0);
        assert_eq!(full_similarity(&img, "q", &m).unwrap(), 0.0);
    }

    #[test]
    fn min_similarity_takes_minimum() {
        let (m, img) = recorded();
        let v = min_similarity(&img, &["p".into(), "c1".into()], &m).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
        assert!(matches!(min_similarity(&img, &[], &m), Err(Error::Input(_))));
    }

    #[test]
    fn caption_similarity_averages_captions() {
        let (m, img) = recorded();
        // c1·p = 0.8, c2·p = 0.6
        let v = text_caption_similarity(&img, "p", &m, &m, 2).unwrap();
        assert!((v - 0.7).abs() < 1e-12);
        let single = text_caption_similarity(&img, "p", &m, &m, 1).unwrap();
        assert!((single - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_recordings_are_config_errors() {
        let (m, _) = recorded();
        assert!(matches!(full_similarity(&solid([9, 9, 9]), "p", &m), Err(Error::Config(_))));
    }

    #[test]
    fn palette_scorer_prefers_matching_color() {
        let red = solid([210, 20, 20]);
        let s = PaletteScorer;
        let r = full_similarity(&red, "a red cat", &s).unwrap();
        let b = full_similarity(&red, "a blue cat", &s).unwrap();
        assert!(r > b);
        assert!((-1.0..=1.0).contains(&r));
        let caps = PaletteCaptioner.caption(&red, 2).unwrap();
        assert!(caps[0].starts_with("a red"));
        assert_eq!(caps.len(), 2);
    }
}
