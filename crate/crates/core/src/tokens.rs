//! Token sequences with lineage tracking.
//!
//! Every token carries the set of original indices it accounts for and the
//! original position of its dominant source. Lineage is what lets the mask
//! renderer show which patches were folded into which survivors, and what the
//! partition invariants are stated over.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which prompt region a token belongs to. Encoder-stage sequences are all
/// `Image`; LM-stage sequences are `System* Image* Instruction*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanTag {
    System,
    Image,
    Instruction,
}

/// An ordered token sequence: embeddings plus per-token lineage, original
/// position, and span tag.
///
/// Invariants maintained by the constructors and reduction operations:
/// lineage sets are non-empty, pairwise disjoint subsets of
/// `0..origin_len`; positions are valid original indices; embeddings are
/// finite. Fresh (un-reduced) sequences additionally have strictly
/// increasing positions within each span, which merge operations are allowed
/// to relax for the appended merged token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    tokens: Matrix,
    lineage: Vec<BTreeSet<usize>>,
    positions: Vec<usize>,
    span_tags: Vec<SpanTag>,
    origin_len: usize,
}

impl TokenSeq {
    /// Builds a sequence from raw parts, validating every invariant except
    /// position monotonicity (see [`TokenSeq::validate_fresh`]).
    pub fn from_parts(
        tokens: Matrix,
        lineage: Vec<BTreeSet<usize>>,
        positions: Vec<usize>,
        span_tags: Vec<SpanTag>,
        origin_len: usize,
    ) -> Result<Self> {
        let n = tokens.rows();
        if n == 0 {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if lineage.len() != n || positions.len() != n || span_tags.len() != n {
            return Err(Error::InvalidInput(format!(
                "token sequence parts disagree on length: {n} tokens, {} lineage sets, \
                 {} positions, {} span tags",
                lineage.len(),
                positions.len(),
                span_tags.len()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::DegenerateInput(
                "token embeddings contain non-finite values".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, set) in lineage.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidInput(format!("token {i} has empty lineage")));
            }
            for &src in set {
                if src >= origin_len {
                    return Err(Error::InvalidInput(format!(
                        "token {i} lineage references source {src} outside 0..{origin_len}"
                    )));
                }
                if !seen.insert(src) {
                    return Err(Error::InvalidInput(format!(
                        "source index {src} appears in more than one lineage set"
                    )));
                }
            }
        }
        for (i, &p) in positions.iter().enumerate() {
            if p >= origin_len {
                return Err(Error::InvalidInput(format!(
                    "token {i} position {p} outside 0..{origin_len}"
                )));
            }
        }
        Ok(TokenSeq {
            tokens,
            lineage,
            positions,
            span_tags,
            origin_len,
        })
    }

    /// A fresh sequence where token `i` is its own lineage and position,
    /// all tokens sharing one span tag.
    pub fn from_embeddings(tokens: Matrix, tag: SpanTag) -> Result<Self> {
        let n = tokens.rows();
        let lineage = (0..n).map(|i| BTreeSet::from([i])).collect();
        let positions = (0..n).collect();
        let tags = vec![tag; n];
        Self::from_parts(tokens, lineage, positions, tags, n)
    }

    /// Concatenates system, image, and instruction embeddings into one fresh
    /// prompt sequence tagged by span. Positions and lineage index into the
    /// combined prompt.
    pub fn lm_prompt(system: &Matrix, image: &Matrix, instruction: &Matrix) -> Result<Self> {
        let dim = image.cols();
        if system.cols() != dim || instruction.cols() != dim {
            return Err(Error::InvalidInput(format!(
                "prompt spans disagree on embedding width: system {}, image {}, instruction {}",
                system.cols(),
                dim,
                instruction.cols()
            )));
        }
        let n = system.rows() + image.rows() + instruction.rows();
        let mut data = Vec::with_capacity(n * dim);
        data.extend_from_slice(system.data());
        data.extend_from_slice(image.data());
        data.extend_from_slice(instruction.data());
        let mut tags = vec![SpanTag::System; system.rows()];
        tags.extend(vec![SpanTag::Image; image.rows()]);
        tags.extend(vec![SpanTag::Instruction; instruction.rows()]);
        let lineage = (0..n).map(|i| BTreeSet::from([i])).collect();
        Self::from_parts(Matrix::from_vec(n, dim, data), lineage, (0..n).collect(), tags, n)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        self.tokens.row(i)
    }

    pub fn lineage(&self) -> &[BTreeSet<usize>] {
        &self.lineage
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn span_tags(&self) -> &[SpanTag] {
        &self.span_tags
    }

    /// Length of the original (un-reduced) sequence this one descends from.
    pub fn origin_len(&self) -> usize {
        self.origin_len
    }

    /// The contiguous range of image-tagged tokens. Errors if there are no
    /// image tokens or they are interleaved with other spans.
    pub fn image_span(&self) -> Result<Range<usize>> {
        let first = self
            .span_tags
            .iter()
            .position(|t| *t == SpanTag::Image)
            .ok_or_else(|| Error::InvalidInput("sequence has no image tokens".into()))?;
        let last = self
            .span_tags
            .iter()
            .rposition(|t| *t == SpanTag::Image)
            .expect("position found above");
        if self.span_tags[first..=last].iter().any(|t| *t != SpanTag::Image) {
            return Err(Error::InvalidInput(
                "image span is not contiguous".into(),
            ));
        }
        Ok(first..last + 1)
    }

    /// New sequence keeping only the listed token indices, in the given
    /// order. Lineage, positions, and tags follow their tokens.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!(
                    "select index {i} out of range for {} tokens",
                    self.len()
                )));
            }
        }
        Self::from_parts(
            self.tokens.select_rows(indices),
            indices.iter().map(|&i| self.lineage[i].clone()).collect(),
            indices.iter().map(|&i| self.positions[i]).collect(),
            indices.iter().map(|&i| self.span_tags[i]).collect(),
            self.origin_len,
        )
    }

    /// Replaces the embedding matrix, keeping lineage/positions/tags. The
    /// replacement must have the same number of rows.
    pub fn with_tokens(&self, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != self.len() {
            return Err(Error::InvalidInput(format!(
                "replacement has {} rows, sequence has {}",
                tokens.rows(),
                self.len()
            )));
        }
        Self::from_parts(
            tokens,
            self.lineage.clone(),
            self.positions.clone(),
            self.span_tags.clone(),
            self.origin_len,
        )
    }

    /// Union of all lineage sets (the original indices still accounted for).
    pub fn coverage(&self) -> BTreeSet<usize> {
        let mut all = BTreeSet::new();
        for set in &self.lineage {
            all.extend(set.iter().copied());
        }
        all
    }

    /// Checks that lineage sets partition the full original index set
    /// exactly. Holds after any chain of merges; pruned sequences instead
    /// satisfy kept-plus-discarded coverage, checked by the caller.
    pub fn check_lineage_partition(&self) -> Result<()> {
        // Disjointness is enforced at construction; here we check coverage.
        let covered = self.coverage();
        if covered.len() != self.origin_len {
            return Err(Error::InvalidInput(format!(
                "lineage covers {} of {} original indices",
                covered.len(),
                self.origin_len
            )));
        }
        Ok(())
    }

    /// Extra invariant for freshly constructed sequences: positions strictly
    /// increase within each span.
    pub fn validate_fresh(&self) -> Result<()> {
        for w in 0..self.len().saturating_sub(1) {
            if self.span_tags[w] == self.span_tags[w + 1]
                && self.positions[w] >= self.positions[w + 1]
            {
                return Err(Error::InvalidInput(format!(
                    "positions not strictly increasing within span at token {w}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(n: usize, dim: usize) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        TokenSeq::from_embeddings(Matrix::randn(n, dim, 1.0, &mut rng), SpanTag::Image).unwrap()
    }

    #[test]
    fn fresh_sequences_satisfy_all_invariants() {
        let seq = fresh(7, 4);
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.origin_len(), 7);
        seq.check_lineage_partition().unwrap();
        seq.validate_fresh().unwrap();
    }

    #[test]
    fn lm_prompt_concatenates_and_tags_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = Matrix::randn(2, 4, 1.0, &mut rng);
        let img = Matrix::randn(3, 4, 1.0, &mut rng);
        let ins = Matrix::randn(2, 4, 1.0, &mut rng);
        let seq = TokenSeq::lm_prompt(&sys, &img, &ins).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.image_span().unwrap(), 2..5);
        assert_eq!(seq.span_tags()[0], SpanTag::System);
        assert_eq!(seq.span_tags()[6], SpanTag::Instruction);
        assert_eq!(seq.token(2), img.row(0));
        seq.validate_fresh().unwrap();
    }

    #[test]
    fn select_preserves_lineage_and_positions() {
        let seq = fresh(5, 3);
        let kept = seq.select(&[0, 2, 4]).unwrap();
        assert_eq!(kept.len(), 3);
        assert_eq!(kept.positions(), &[0, 2, 4]);
        assert_eq!(kept.lineage()[1], BTreeSet::from([2]));
        assert_eq!(kept.origin_len(), 5);
        // Coverage is now partial, so the partition check must fail.
        assert!(kept.check_lineage_partition().is_err());
    }

    #[test]
    fn rejects_overlapping_lineage() {
        let seq = fresh(3, 2);
        let mut lineage = seq.lineage().to_vec();
        lineage[1].insert(0);
        let err = TokenSeq::from_parts(
            seq.tokens().clone(),
            lineage,
            seq.positions().to_vec(),
            seq.span_tags().to_vec(),
            3,
        )
        .unwrap_err();
        assert_eq!(err.kind(), "invalid_input");
    }

    #[test]
    fn rejects_non_finite_embeddings() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f32::INFINITY);
        assert!(TokenSeq::from_embeddings(m, SpanTag::Image).is_err());
    }

    #[test]
    fn image_span_must_be_contiguous() {
        let seq = fresh(4, 2);
        let mut tags = seq.span_tags().to_vec();
        tags[1] = SpanTag::System;
        let broken = TokenSeq::from_parts(
            seq.tokens().clone(),
            seq.lineage().to_vec(),
            seq.positions().to_vec(),
            tags,
            4,
        )
        .unwrap();
        assert!(broken.image_span().is_err());
    }
}
