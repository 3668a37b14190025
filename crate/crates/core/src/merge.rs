//! One-step token merging driven by received-attention scores.
//!
//! A merge event partitions the sequence (or its image span) into the
//! top-attended survivors and the `r+1` least-attended tokens, collapses the
//! latter into a single token with one weighted sum, and appends that token at
//! the end of the merged region. Weights fall linearly from `r+1` down to `1`
//! and are normalized so the merged token stays on the embedding scale.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::similarity::{similarity_encoder, similarity_lm, CausalDenominator, SimilarityScores};
use crate::tokens::TokenSeq;

/// Which end of the least-attended-first queue receives the largest weight.
///
/// `Descending` walks the weight list as written, giving weight `r+1` to the
/// least-attended token; `Ascending` gives it to the most-attended one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOrder {
    #[default]
    Descending,
    Ascending,
}

/// The normalized linear weight list for merging `r+1` tokens into one.
/// Weights are kept in f64 so the merge arithmetic is limited only by the
/// final cast back to the f32 embedding storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    r: usize,
    weights: Vec<f64>,
}

impl MergeWeights {
    /// Builds the weight list for reduction count `r >= 1`: raw weights
    /// `{r+1, r, ..., 1}` divided by their sum `T = (r+1)(r+2)/2`.
    pub fn new(r: usize, order: WeightOrder) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidInput(
                "merge weights need a reduction count of at least 1".into(),
            ));
        }
        let total = ((r + 1) * (r + 2) / 2) as f64;
        let mut weights: Vec<f64> = (0..=r).map(|j| (r + 1 - j) as f64 / total).collect();
        if order == WeightOrder::Ascending {
            weights.reverse();
        }
        Ok(MergeWeights { r, weights })
    }

    /// The unnormalized weight list `{r+1, r, ..., 1}`.
    pub fn raw(r: usize) -> Vec<u64> {
        (1..=r as u64 + 1).rev().collect()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Splits score indices into survivors and merge candidates.
///
/// Returns `(unmerged, merged)`: `merged` holds the `r+1` lowest-scoring
/// indices ordered ascending by score (ties to the smaller index), `unmerged`
/// the rest in original order. Indices are relative to the scored range.
pub fn partition(scores: &SimilarityScores, r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if r < 1 || r + 2 > n {
        return Err(Error::Schedule(format!(
            "reduction count {r} outside [1, {}] for {n} tokens",
            n.saturating_sub(2)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores
            .get(a)
            .total_cmp(&scores.get(b))
            .then_with(|| a.cmp(&b))
    });
    let merged: Vec<usize> = order[..=r].to_vec();
    let cut: BTreeSet<usize> = merged.iter().copied().collect();
    let unmerged: Vec<usize> = (0..n).filter(|i| !cut.contains(i)).collect();
    Ok((unmerged, merged))
}

/// Collapses `r+1` token embeddings (least-attended first) into one weighted
/// sum. The weight list length must match the token count. Accumulation runs
/// in f64 and only the result is cast to f32.
pub fn fast_merge(tokens: &[&[f32]], weights: &MergeWeights) -> Result<Vec<f32>> {
    if tokens.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} tokens but {} weights",
            tokens.len(),
            weights.len()
        )));
    }
    let dim = tokens[0].len();
    let mut acc = vec![0.0f64; dim];
    for (&row, &w) in tokens.iter().zip(weights.weights()) {
        if row.len() != dim {
            return Err(Error::InvalidInput("merge inputs differ in width".into()));
        }
        for (o, &v) in acc.iter_mut().zip(row) {
            *o += w * f64::from(v);
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Which pipeline stage a merge event runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Lm,
}

/// Knobs for the merge rule shared by every event in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeOptions {
    pub weight_order: WeightOrder,
    pub lm_denominator: CausalDenominator,
}

/// Runs one merge event on `seq` using the attention map from the same block.
///
/// Encoder stage scores and merges the whole sequence; LM stage scores and
/// merges only `image_span`, keeping system and instruction tokens untouched.
/// The output is `unmerged tokens in original order, then the merged token`
/// at the end of the merged region, with length `seq.len() - r`.
pub fn merge_step(
    seq: &TokenSeq,
    attn: &AttentionMap,
    r: usize,
    stage: Stage,
    image_span: Option<Range<usize>>,
    opts: &MergeOptions,
) -> Result<TokenSeq> {
    if attn.len() != seq.len() {
        return Err(Error::InvalidInput(format!(
            "attention map covers {} tokens, sequence has {}",
            attn.len(),
            seq.len()
        )));
    }
    let span = match stage {
        Stage::Encoder => 0..seq.len(),
        Stage::Lm => image_span.ok_or_else(|| {
            Error::InvalidInput("LM-stage merge requires an image span".into())
        })?,
    };
    let scores = match stage {
        Stage::Encoder => similarity_encoder(attn)?,
        Stage::Lm => similarity_lm(attn, span.clone(), opts.lm_denominator)?,
    };
    let (unmerged_rel, merged_rel) = partition(&scores, r)?;
    let weights = MergeWeights::new(r, opts.weight_order)?;

    let merged_abs: Vec<usize> = merged_rel.iter().map(|&i| span.start + i).collect();
    let rows: Vec<&[f32]> = merged_abs.iter().map(|&i| seq.token(i)).collect();
    let new_token = fast_merge(&rows, &weights)?;
    let mut new_lineage = BTreeSet::new();
    for &i in &merged_abs {
        new_lineage.extend(seq.lineage()[i].iter().copied());
    }
    // The queue is ordered least-attended first, so its last entry is the
    // most-attended input; the merged token takes over its position and tag.
    let anchor = *merged_abs.last().expect("r+1 >= 2 merged tokens");

    let out_len = seq.len() - r;
    let dim = seq.dim();
    let mut tokens = Vec::with_capacity(out_len * dim);
    let mut lineage = Vec::with_capacity(out_len);
    let mut positions = Vec::with_capacity(out_len);
    let mut tags = Vec::with_capacity(out_len);
    let push_existing = |i: usize, tokens: &mut Vec<f32>,
                             lineage: &mut Vec<BTreeSet<usize>>,
                             positions: &mut Vec<usize>| {
        tokens.extend_from_slice(seq.token(i));
        lineage.push(seq.lineage()[i].clone());
        positions.push(seq.positions()[i]);
    };
    for i in 0..span.start {
        push_existing(i, &mut tokens, &mut lineage, &mut positions);
        tags.push(seq.span_tags()[i]);
    }
    for &rel in &unmerged_rel {
        let i = span.start + rel;
        push_existing(i, &mut tokens, &mut lineage, &mut positions);
        tags.push(seq.span_tags()[i]);
    }
    tokens.extend_from_slice(&new_token);
    lineage.push(new_lineage);
    positions.push(seq.positions()[anchor]);
    tags.push(seq.span_tags()[anchor]);
    for i in span.end..seq.len() {
        push_existing(i, &mut tokens, &mut lineage, &mut positions);
        tags.push(seq.span_tags()[i]);
    }

    TokenSeq::from_parts(
        Matrix::from_vec(out_len, dim, tokens),
        lineage,
        positions,
        tags,
        seq.origin_len(),
    )
}
