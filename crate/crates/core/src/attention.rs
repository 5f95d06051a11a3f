//! Cross-attention aggregation at the loss resolution.
//!
//! Records arrive as pre-softmax logits `QKᵀ/√m` over `[spatial × encoder
//! tokens]`, with the start-of-text token in column 0. Aggregation averages
//! every 16×16 record, drops the start token and any padding, merges the
//! sub-tokens of each prompt word, and softmax-renormalizes the remaining
//! token axis to obtain scores.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial side length at which attention enters the loss.
pub const LOSS_RESOLUTION: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionRecord {
    pub layer_id: String,
    pub head_id: String,
    pub resolution: usize,
    /// `[resolution² × encoder tokens]`, start token in column 0.
    pub logits: Array2<f64>,
}

impl CrossAttentionRecord {
    pub fn new(layer_id: &str, head_id: &str, resolution: usize, logits: Array2<f64>) -> Result<Self> {
        let rec = Self {
            layer_id: layer_id.to_string(),
            head_id: head_id.to_string(),
            resolution,
            logits,
        };
        rec.check()?;
        Ok(rec)
    }

    pub fn check(&self) -> Result<()> {
        if self.logits.nrows() != self.resolution * self.resolution {
            return Err(Error::input(format!(
                "record {}/{}: {} spatial rows for resolution {}",
                self.layer_id,
                self.head_id,
                self.logits.nrows(),
                self.resolution
            )));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "record {}/{} has non-finite logits",
                self.layer_id, self.head_id
            )));
        }
        Ok(())
    }
}

/// Maps each prompt word to the encoder columns of its sub-tokens.
///
/// Column indices are absolute, so column 0 (the start token) never appears.
/// Columns not covered by any word (end-of-text, padding) are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    groups: Vec<Vec<usize>>,
}

impl TokenAlignment {
    /// One encoder column per word, starting right after the start token.
    pub fn identity(words: usize) -> Self {
        Self {
            groups: (1..=words).map(|c| vec![c]).collect(),
        }
    }

    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::input("alignment group without sub-tokens"));
            }
            for &c in g {
                if c == 0 {
                    return Err(Error::input("alignment may not reference the start token"));
                }
                if !seen.insert(c) {
                    return Err(Error::input(format!("encoder column {} aligned twice", c)));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn words(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn max_column(&self) -> usize {
        self.groups.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Per-token attention features and scores, token-major `[N × spatial]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAttention {
    pub features: Array2<f64>,
    pub scores: Array2<f64>,
    pub resolution: usize,
}

impl AggregatedAttention {
    pub fn token_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature(&self, token: usize) -> ndarray::ArrayView1<'_, f64> {
        self.features.row(token)
    }

    pub fn score(&self, token: usize) -> ndarray::ArrayView1<'_, f64> {
        self.scores.row(token)
    }

    /// Builds features and scores from spatial-major aggregated logits.
    pub fn from_logits(mean_logits: &Array2<f64>, alignment: &TokenAlignment, resolution: usize) -> Result<Self> {
        if alignment.max_column() >= mean_logits.ncols() {
            return Err(Error::input(format!(
                "alignment references column {} but records have {} tokens",
                alignment.max_column(),
                mean_logits.ncols()
            )));
        }
        if alignment.words() == 0 {
            return Err(Error::input("no prompt tokens to aggregate"));
        }
        let features = merge_subtokens(mean_logits, alignment);
        let scores = softmax_tokens(&features);
        Ok(Self {
            features,
            scores,
            resolution,
        })
    }
}

/// Averages the logit columns of each word's sub-tokens; returns `[N × spatial]`.
pub fn merge_subtokens(logits: &Array2<f64>, alignment: &TokenAlignment) -> Array2<f64> {
    let spatial = logits.nrows();
    let mut out = Array2::zeros((alignment.words(), spatial));
    for (w, cols) in alignment.groups().iter().enumerate() {
        let inv = 1.0 / cols.len() as f64;
        for &c in cols {
            for p in 0..spatial {
                out[[w, p]] += logits[[p, c]] * inv;
            }
        }
    }
    out
}

/// Softmax over the token axis (rows) of a token-major map, per position.
fn softmax_tokens(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Drops the start-token column and softmaxes the rest per spatial position.
///
/// Input is spatial-major `[spatial × tokens]` with the start token at
/// column 0; the result has one fewer column and rows summing to one.
pub fn renormalize_without_sot(logits: &Array2<f64>) -> Result<Array2<f64>> {
    if logits.ncols() < 2 {
        return Err(Error::input(
            "need the start token plus at least one prompt token",
        ));
    }
    let mut out = logits.slice(ndarray::s![.., 1..]).to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Unweighted mean of all records at [`LOSS_RESOLUTION`].
///
/// Returns the mean logits and the indices of the contributing records.
pub fn mean_loss_logits(records: &[CrossAttentionRecord]) -> Result<(Array2<f64>, Vec<usize>)> {
    let used: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.resolution == LOSS_RESOLUTION)
        .map(|(i, _)| i)
        .collect();
    let Some(&first) = used.first() else {
        return Err(Error::config(format!(
            "no {res}x{res} cross-attention records; the denoiser adapter must expose them",
            res = LOSS_RESOLUTION
        )));
    };
    let shape = records[first].logits.dim();
    let mut sum = Array2::<f64>::zeros(shape);
    for &i in &used {
        let r = &records[i];
        r.check()?;
        if r.logits.dim() != shape {
            return Err(Error::input(format!(
                "record {}/{} has shape {:?}, expected {:?}",
                r.layer_id,
                r.head_id,
                r.logits.dim(),
                shape
            )));
        }
        sum += &r.logits;
    }
    sum /= used.len() as f64;
    Ok((sum, used))
}

/// Aggregates records into per-word features and scores.
pub fn aggregate(records: &[CrossAttentionRecord], alignment: &TokenAlignment) -> Result<AggregatedAttention> {
    let (mean, _) = mean_loss_logits(records)?;
    AggregatedAttention::from_logits(&mean, alignment, LOSS_RESOLUTION)
}

/// Pulls gradients on features and scores back to each record's logits.
///
/// Returns one gradient per input record (zeros for records that did not
/// contribute to the aggregate), in record order.
pub fn aggregate_backward(
    records: &[CrossAttentionRecord],
    alignment: &TokenAlignment,
    agg: &AggregatedAttention,
    grad_features: &Array2<f64>,
    grad_scores: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let (n, spatial) = agg.features.dim();
    if grad_features.dim() != (n, spatial) || grad_scores.dim() != (n, spatial) {
        return Err(Error::input("gradient shape does not match aggregated attention"));
    }
    let (_, used) = mean_loss_logits(records)?;

    // scores = softmax over tokens of features, per position
    let mut g = grad_features.clone();
    for p in 0..spatial {
        let dot: f64 = (0..n).map(|w| agg.scores[[w, p]] * grad_scores[[w, p]]).sum();
        for w in 0..n {
            g[[w, p]] += agg.scores[[w, p]] * (grad_scores[[w, p]] - dot);
        }
    }

    let ncols = records[used[0]].logits.ncols();
    let mut g_mean = Array2::<f64>::zeros((spatial, ncols));
    for (w, cols) in alignment.groups().iter().enumerate() {
        let inv = 1.0 / cols.len() as f64;
        for &c in cols {
            for p in 0..spatial {
                g_mean[[p, c]] += g[[w, p]] * inv;
            }
        }
    }
    g_mean /= used.len() as f64;

    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if used.contains(&i) {
                g_mean.clone()
            } else {
                Array2::zeros(r.logits.dim())
            }
        })
        .collect())
}
