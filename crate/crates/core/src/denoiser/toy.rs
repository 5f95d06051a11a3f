//! Miniature differentiable cross-attention denoiser with seeded frozen weights.
//!
//! The latent grid is 16×16 with 4 channels. Two cross-attention layers read
//! the prompt: the first queries from the raw latent, the second from a
//! blurred, nonlinearly projected latent. A single self-attention layer mixes
//! positions. The network predicts a clean latent `x̂₀` and returns the noise
//! consistent with it, so DDIM steps stay bounded.

use image::RgbImage;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{
    check_latent, latent_to_rgb, AttentionInjection, AttentionStore, DenoiserAdapter, ForwardOutput, Latent,
    LatentShape, NoiseSchedule, PromptEncoding,
};
use crate::attention::{CrossAttentionRecord, TokenAlignment};
use crate::error::{Error, Result};

const CHANNELS: usize = 4;
const SIDE: usize = 16;
const HIDDEN: usize = 8;
const TIME_FREQS: [f64; 4] = [1.0, 3.0, 9.0, 27.0];
/// Sub-token length for words longer than [`MAX_WORD`].
const PIECE: usize = 6;
const MAX_WORD: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserConfig {
    pub seed: u64,
    pub token_dim: usize,
    /// Query/key width `m`.
    pub attn_dim: usize,
    /// Standard deviation of query weights; larger values sharpen attention.
    pub query_scale: f64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_dim: 8,
            attn_dim: 8,
            query_scale: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
struct CrossLayer {
    wq: Array2<f64>,
    wt: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    schedule: NoiseSchedule,
    cross1: CrossLayer,
    cross2: CrossLayer,
    /// Hidden projection feeding the second layer's queries.
    u: Array2<f64>,
    u_bias: Array1<f64>,
    self_q: Array2<f64>,
    self_k: Array2<f64>,
    self_v: Array2<f64>,
    skip: Array2<f64>,
    sot: Array1<f64>,
    eot: Array1<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array1::from_shape_fn(len, |_| n.sample(rng))
}

fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(key.as_bytes()).finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Splits a word into the toy tokenizer's sub-tokens.
pub fn toy_subtokens(word: &str) -> Vec<String> {
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    if chars.len() <= MAX_WORD {
        return vec![lower];
    }
    chars
        .chunks(PIECE)
        .enumerate()
        .map(|(i, c)| {
            let piece: String = c.iter().collect();
            if i == 0 {
                piece
            } else {
                format!("##{}", piece)
            }
        })
        .collect()
}

/// Seeded random token embeddings: a start-token row followed by `n` rows.
pub fn embed_tokens(n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::input("cannot embed an empty token sequence"));
    }
    let dim = ToyDenoiserConfig::default().token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(normal_matrix(&mut rng, n + 1, dim, 1.0))
}

fn time_features(t: usize) -> Array1<f64> {
    let x = t as f64 / 1000.0 * std::f64::consts::PI;
    TIME_FREQS
        .iter()
        .flat_map(|f| [(f * x).sin(), (f * x).cos()])
        .collect()
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    m
}

/// `[C, H, W]` → `[positions × C]`.
fn to_tokens(z: &Latent) -> Array2<f64> {
    let (c, h, w) = z.dim();
    z.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous latent")
        .t()
        .to_owned()
}

fn from_tokens(x: &Array2<f64>) -> Latent {
    x.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((CHANNELS, SIDE, SIDE))
        .expect("positions × channels")
}

fn neighbors(p: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((p / SIDE) as isize, (p % SIDE) as isize);
    (-1..=1).flat_map(move |dy| {
        (-1..=1).map(move |dx| {
            let yy = (y + dy).clamp(0, SIDE as isize - 1) as usize;
            let xx = (x + dx).clamp(0, SIDE as isize - 1) as usize;
            yy * SIDE + xx
        })
    })
}

/// 3×3 box blur with replicate padding over `[positions × features]`.
fn blur(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for p in 0..x.nrows() {
        let mut row = out.row_mut(p);
        for q in neighbors(p) {
            row.scaled_add(1.0 / 9.0, &x.row(q));
        }
    }
    out
}

fn blur_transpose(g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(g.dim());
    for p in 0..g.nrows() {
        for q in neighbors(p) {
            out.row_mut(q).scaled_add(1.0 / 9.0, &g.row(p));
        }
    }
    out
}

struct Activations {
    tokens: Array2<f64>,
    hidden: Array2<f64>,
    logits1: Array2<f64>,
    logits2: Array2<f64>,
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, m) = (config.token_dim, config.attn_dim);
        let tf = 2 * TIME_FREQS.len();
        let layer = |rng: &mut ChaCha8Rng, q_in: usize| CrossLayer {
            wq: normal_matrix(rng, m, q_in, config.query_scale / (q_in as f64).sqrt()),
            wt: normal_matrix(rng, m, tf, 0.3),
            wk: normal_matrix(rng, m, d, 1.0 / (d as f64).sqrt()),
            wv: normal_matrix(rng, m, d, 1.0 / (d as f64).sqrt()),
            wo: normal_matrix(rng, CHANNELS, m, 1.0 / (m as f64).sqrt()),
        };
        let cross1 = layer(&mut rng, CHANNELS);
        let cross2 = layer(&mut rng, HIDDEN);
        let u = normal_matrix(&mut rng, HIDDEN, CHANNELS, 2.0 / (CHANNELS as f64).sqrt());
        let u_bias = normal_vector(&mut rng, HIDDEN, 0.1);
        let self_q = normal_matrix(&mut rng, m, CHANNELS, 1.0 / (CHANNELS as f64).sqrt());
        let self_k = normal_matrix(&mut rng, m, CHANNELS, 1.0 / (CHANNELS as f64).sqrt());
        let self_v = normal_matrix(&mut rng, CHANNELS, CHANNELS, 0.5);
        let skip = normal_matrix(&mut rng, CHANNELS, CHANNELS, 0.5);
        let sot = normal_vector(&mut rng, d, 1.0);
        let eot = normal_vector(&mut rng, d, 1.0);
        Self {
            schedule: NoiseSchedule::linear(0.00085, 0.012, 1000),
            config,
            cross1,
            cross2,
            u,
            u_bias,
            self_q,
            self_k,
            self_v,
            skip,
            sot,
            eot,
        }
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    fn token_embedding(&self, piece: &str) -> Array1<f64> {
        let mut rng = keyed_rng(self.config.seed, piece);
        normal_vector(&mut rng, self.config.token_dim, 1.0)
    }

    fn inv_sqrt_m(&self) -> f64 {
        1.0 / (self.config.attn_dim as f64).sqrt()
    }

    fn keys(&self, layer: &CrossLayer, enc: &PromptEncoding) -> Array2<f64> {
        enc.embeddings.dot(&layer.wk.t())
    }

    fn check_encoding(&self, enc: &PromptEncoding) -> Result<()> {
        if enc.embeddings.ncols() != self.config.token_dim || enc.embeddings.nrows() < 2 {
            return Err(Error::input(format!(
                "prompt encoding has shape {:?}, expected [≥2 × {}]",
                enc.embeddings.dim(),
                self.config.token_dim
            )));
        }
        if enc.alignment.max_column() >= enc.embeddings.nrows() {
            return Err(Error::input("token alignment points past the encoder tokens"));
        }
        Ok(())
    }

    fn activations(&self, z: &Latent, t: usize, enc: &PromptEncoding) -> Result<Activations> {
        check_latent(self.latent_shape(), z)?;
        self.check_encoding(enc)?;
        let tokens = to_tokens(z);
        let tf = time_features(t);
        let scale = self.inv_sqrt_m();

        let q1 = tokens.dot(&self.cross1.wq.t()) + self.cross1.wt.dot(&tf);
        let logits1 = q1.dot(&self.keys(&self.cross1, enc).t()) * scale;

        let hidden = (blur(&tokens).dot(&self.u.t()) + &self.u_bias).mapv(f64::tanh);
        let q2 = hidden.dot(&self.cross2.wq.t()) + self.cross2.wt.dot(&tf);
        let logits2 = q2.dot(&self.keys(&self.cross2, enc).t()) * scale;
        Ok(Activations {
            tokens,
            hidden,
            logits1,
            logits2,
        })
    }

    fn inject_cross(probs: &mut Array2<f64>, layer: usize, injection: Option<&AttentionInjection>) -> Result<()> {
        let Some(cross) = injection.and_then(|i| i.cross.as_ref()) else {
            return Ok(());
        };
        let src = cross
            .source
            .get(layer)
            .ok_or_else(|| Error::input(format!("cross-attention injection lacks layer {}", layer)))?;
        if src.nrows() != probs.nrows() {
            return Err(Error::input("cross-attention injection has wrong spatial size"));
        }
        for &(dst, from) in &cross.mapping {
            if dst >= probs.ncols() || from >= src.ncols() {
                return Err(Error::input(format!("injection column pair ({}, {}) out of range", dst, from)));
            }
            probs.column_mut(dst).assign(&src.column(from));
        }
        for &(col, factor) in &cross.reweight {
            if col >= probs.ncols() {
                return Err(Error::input(format!("reweight column {} out of range", col)));
            }
            probs.column_mut(col).mapv_inplace(|v| v * factor);
        }
        Ok(())
    }

    /// Clean-latent prediction `x̂₀` given the activations.
    fn predict_clean(
        &self,
        act: &Activations,
        enc: &PromptEncoding,
        injection: Option<&AttentionInjection>,
    ) -> Result<(Array2<f64>, AttentionStore)> {
        let mut store = AttentionStore::default();
        let mut pre = blur(&act.tokens).dot(&self.skip.t());
        for (i, (layer, logits)) in [(&self.cross1, &act.logits1), (&self.cross2, &act.logits2)]
            .into_iter()
            .enumerate()
        {
            let mut probs = softmax_rows(logits.clone());
            Self::inject_cross(&mut probs, i, injection)?;
            let values = enc.embeddings.dot(&layer.wv.t());
            pre += &probs.dot(&values).dot(&layer.wo.t());
            store.cross.push(probs);
        }

        let q = act.tokens.dot(&self.self_q.t());
        let k = act.tokens.dot(&self.self_k.t());
        let mut probs = softmax_rows(q.dot(&k.t()) * self.inv_sqrt_m());
        if let Some(src) = injection.and_then(|i| i.self_attn.as_ref()) {
            let first = src.first().ok_or_else(|| Error::input("empty self-attention injection"))?;
            if first.dim() != probs.dim() {
                return Err(Error::input("self-attention injection has wrong shape"));
            }
            probs.assign(first);
        }
        pre += &probs.dot(&act.tokens.dot(&self.self_v.t()));
        store.self_attn.push(probs);
        Ok((pre.mapv(f64::tanh), store))
    }
}

impl DenoiserAdapter for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> LatentShape {
        LatentShape {
            channels: CHANNELS,
            height: SIDE,
            width: SIDE,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode_prompt(&self, words: &[String]) -> Result<PromptEncoding> {
        if words.is_empty() {
            return Err(Error::input("cannot encode an empty prompt"));
        }
        let mut rows = vec![self.sot.clone()];
        let mut groups = Vec::with_capacity(words.len());
        for w in words {
            let mut cols = Vec::new();
            for piece in toy_subtokens(w) {
                cols.push(rows.len());
                rows.push(self.token_embedding(&piece));
            }
            groups.push(cols);
        }
        rows.push(self.eot.clone());
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(PromptEncoding {
            words: words.to_vec(),
            alignment: TokenAlignment::new(groups)?,
            embeddings: ndarray::stack(Axis(0), &views).expect("equal widths"),
        })
    }

    fn encode_unconditional(&self) -> Result<PromptEncoding> {
        let views = [self.sot.view(), self.eot.view()];
        Ok(PromptEncoding {
            words: Vec::new(),
            alignment: TokenAlignment::identity(0),
            embeddings: ndarray::stack(Axis(0), &views).expect("equal widths"),
        })
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        injection: Option<&AttentionInjection>,
    ) -> Result<ForwardOutput> {
        let act = self.activations(z, t, encoding)?;
        let (x0, store) = self.predict_clean(&act, encoding, injection)?;
        let ab = self.schedule.alpha_bar(t);
        let eps = (&act.tokens - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt();
        let records = vec![
            CrossAttentionRecord::new("toy.cross1", "0", SIDE, act.logits1)?,
            CrossAttentionRecord::new("toy.cross2", "0", SIDE, act.logits2)?,
        ];
        Ok(ForwardOutput {
            noise: from_tokens(&eps),
            records,
            store,
        })
    }

    fn attention_vjp(
        &self,
        z: &Latent,
        t: usize,
        encoding: &PromptEncoding,
        record_grads: &[Array2<f64>],
    ) -> Result<Latent> {
        let act = self.activations(z, t, encoding)?;
        if record_grads.len() != 2
            || record_grads[0].dim() != act.logits1.dim()
            || record_grads[1].dim() != act.logits2.dim()
        {
            return Err(Error::input("record gradients do not match the toy records"));
        }
        let scale = self.inv_sqrt_m();
        let d_q1 = record_grads[0].dot(&self.keys(&self.cross1, encoding)) * scale;
        let mut d_tokens = d_q1.dot(&self.cross1.wq);

        let d_q2 = record_grads[1].dot(&self.keys(&self.cross2, encoding)) * scale;
        let d_hidden = d_q2.dot(&self.cross2.wq) * act.hidden.mapv(|h| 1.0 - h * h);
        d_tokens += &blur_transpose(&d_hidden.dot(&self.u));
        Ok(from_tokens(&d_tokens))
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        check_latent(self.latent_shape(), z)?;
        latent_to_rgb(z, 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn latent(seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Latent::from_shape_fn((CHANNELS, SIDE, SIDE), |_| n.sample(&mut rng))
    }

    #[test]
    fn subtokens_split_long_words() {
        assert_eq!(toy_subtokens("cat"), vec!["cat"]);
        assert_eq!(toy_subtokens("Suitcase"), vec!["suitca", "##se"]);
        assert_eq!(toy_subtokens("strawberry"), vec!["strawb", "##erry"]);
    }

    #[test]
    fn embed_tokens_shapes() {
        assert_eq!(embed_tokens(1, 0).unwrap().nrows(), 2);
        assert_eq!(embed_tokens(2, 0).unwrap(), embed_tokens(2, 0).unwrap());
        assert_ne!(embed_tokens(2, 0).unwrap(), embed_tokens(2, 1).unwrap());
        assert!(matches!(embed_tokens(0, 0), Err(Error::Input(_))));
    }

    #[test]
    fn encoding_layout() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a purple suitcase")).unwrap();
        // start, a, purple, suitca, ##se, end
        assert_eq!(enc.embeddings.nrows(), 6);
        assert_eq!(enc.alignment.groups(), &[vec![1], vec![2], vec![3, 4]]);
        let unc = toy.encode_unconditional().unwrap();
        assert_eq!(unc.embeddings.nrows(), 2);
        assert_eq!(unc.embeddings.row(0), enc.embeddings.row(0));
    }

    #[test]
    fn forward_is_deterministic_with_expected_shapes() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a cat")).unwrap();
        let z = latent(1);
        let a = toy.forward(&z, 500, &enc, None).unwrap();
        let b = toy.forward(&z, 500, &enc, None).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.noise.dim(), (4, 16, 16));
        assert_eq!(a.records.len(), 2);
        assert!(a.records.iter().all(|r| r.resolution == 16 && r.logits.dim() == (256, 4)));
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn logits_are_linear_in_token_embeddings() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a red cat")).unwrap();
        let mut scaled = enc.clone();
        scaled.embeddings *= 2.5;
        let z = latent(2);
        let a = toy.forward(&z, 300, &enc, None).unwrap();
        let b = toy.forward(&z, 300, &scaled, None).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            for (x, y) in ra.logits.iter().zip(rb.logits.iter()) {
                assert!((x * 2.5 - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a blue dog")).unwrap();
        let z = latent(3);
        let t = 700;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grads: Vec<Array2<f64>> = (0..2).map(|_| normal_matrix(&mut rng, 256, 5, 1.0)).collect();
        let scalar = |z: &Latent| -> f64 {
            let out = toy.forward(z, t, &enc, None).unwrap();
            out.records.iter().zip(&grads).map(|(r, g)| (&r.logits * g).sum()).sum()
        };
        let analytic = toy.attention_vjp(&z, t, &enc, &grads).unwrap();
        let h = 1e-4;
        for idx in [(0, 0, 0), (1, 5, 7), (3, 15, 15), (2, 8, 0), (0, 0, 15)] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (scalar(&zp) - scalar(&zm)) / (2.0 * h);
            let rel = (analytic[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "{:?}: {} vs {}", idx, analytic[idx], fd);
        }
    }

    #[test]
    fn injection_replaces_columns() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a cat")).unwrap();
        let z = latent(4);
        let src = toy.forward(&z, 900, &enc, None).unwrap();
        let other = toy.encode_prompt(&words("a dog")).unwrap();
        let inj = AttentionInjection {
            cross: Some(super::super::CrossInjection {
                source: src.store.cross.clone(),
                mapping: (0..4).map(|c| (c, c)).collect(),
                reweight: vec![],
            }),
            self_attn: Some(src.store.self_attn.clone()),
        };
        let out = toy.forward(&z, 900, &other, Some(&inj)).unwrap();
        assert_eq!(out.store.cross, src.store.cross);
        assert_eq!(out.store.self_attn, src.store.self_attn);
        let plain = toy.forward(&z, 900, &other, None).unwrap();
        assert_ne!(plain.store.cross, src.store.cross);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let toy = ToyDenoiser::new(Default::default());
        let enc = toy.encode_prompt(&words("a cat")).unwrap();
        let z = Latent::zeros((4, 8, 8));
        assert!(matches!(toy.forward(&z, 10, &enc, None), Err(Error::Input(_))));
    }
}
