//! Attention-derived token importance scores.
//!
//! A token's score is the mean attention it RECEIVES from the other tokens,
//! computed on the head-mean probability matrix. The encoder variant averages
//! over all other tokens; the LM variant averages over the other image-span
//! tokens only, with causally masked entries contributing zero and the
//! denominator fixed at span length minus one. Low-scoring tokens are the
//! merge candidates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};

/// Per-token mean received attention, each value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores(Vec<f32>);

impl SimilarityScores {
    /// Validates that every score is a probability (within float slack).
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() || !(-1e-6..=1.0 + 1e-6).contains(&s) {
                return Err(Error::DegenerateInput(format!(
                    "score {s} at index {i} is outside [0, 1]"
                )));
            }
        }
        Ok(SimilarityScores(
            scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f32 {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// How the LM-stage score divides the received-attention sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalDenominator {
    /// Divide by `N_t - 1` for every token, masked entries counting as zero.
    #[default]
    Fixed,
    /// Divide by the number of span tokens actually allowed to attend to the
    /// token (ablation variant; the last span token has none and scores 0).
    PerToken,
}

/// Encoder-stage score: `scores[i] = (1/(N-1)) * sum_{k != i} A_bar[k][i]`,
/// the mean attention token `i` receives from every other token under the
/// head-mean map `A_bar`.
pub fn similarity_encoder(attn: &AttentionMap) -> Result<SimilarityScores> {
    if attn.is_causal() {
        return Err(Error::InvalidInput(
            "encoder similarity expects a bidirectional attention map".into(),
        ));
    }
    let n = attn.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "similarity needs at least 2 tokens, got {n}"
        )));
    }
    let mean = attn.head_mean();
    let inv = 1.0 / (n as f32 - 1.0);
    let mut scores = vec![0.0f32; n];
    for k in 0..n {
        let row = mean.row(k);
        for (i, &p) in row.iter().enumerate() {
            if i != k {
                scores[i] += p;
            }
        }
    }
    for s in &mut scores {
        *s *= inv;
    }
    SimilarityScores::new(scores)
}

/// LM-stage score over the image span: for span token `i`,
/// `scores[i] = (1/(N_t - 1)) * sum_{k in span, k != i} A_bar[k][i]`, with
/// causally masked entries contributing zero. Returned scores are indexed
/// relative to the span start.
pub fn similarity_lm(
    attn: &AttentionMap,
    image_span: Range<usize>,
    denom: CausalDenominator,
) -> Result<SimilarityScores> {
    if !attn.is_causal() {
        return Err(Error::InvalidInput(
            "LM similarity expects a causal attention map".into(),
        ));
    }
    if image_span.end > attn.len() || image_span.start >= image_span.end {
        return Err(Error::InvalidInput(format!(
            "image span {}..{} out of range for {} tokens",
            image_span.start,
            image_span.end,
            attn.len()
        )));
    }
    let n_t = image_span.len();
    if n_t < 2 {
        return Err(Error::DegenerateInput(format!(
            "LM similarity needs an image span of at least 2 tokens, got {n_t}"
        )));
    }
    let mean = attn.head_mean();
    let mut scores = vec![0.0f32; n_t];
    for k in image_span.clone() {
        let row = mean.row(k);
        for (rel, i) in image_span.clone().enumerate() {
            // Entries with k < i sit above the diagonal and are exactly zero,
            // so summing them unconditionally implements the masked sum.
            if i != k {
                scores[rel] += row[i];
            }
        }
    }
    match denom {
        CausalDenominator::Fixed => {
            let inv = 1.0 / (n_t as f32 - 1.0);
            for s in &mut scores {
                *s *= inv;
            }
        }
        CausalDenominator::PerToken => {
            for (rel, s) in scores.iter_mut().enumerate() {
                // Span tokens after position `rel` are the only ones the
                // causal mask allows to attend to it.
                let attenders = (n_t - 1 - rel).max(1);
                *s /= attenders as f32;
            }
        }
    }
    SimilarityScores::new(scores)
}
