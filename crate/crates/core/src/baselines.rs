//! Reference token-reduction strategies, all driven through one dispatch so
//! schedules can swap them freely: attention-queue merging (the default),
//! greedy nearest-neighbor merging, bipartite matching, k-means clustering,
//! and the two pruning baselines.

use std::collections::BTreeSet;
use std::ops::Range;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::merge::{merge_step, MergeOptions, Stage, WeightOrder};
use crate::similarity::{similarity_encoder, similarity_lm, CausalDenominator, SimilarityScores};
use crate::tokens::TokenSeq;

/// The available reduction strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Illava,
    Greedy,
    Bipartite,
    Kmeans,
    PruneTopk,
    PruneRandom,
    None,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Illava,
        StrategyKind::Greedy,
        StrategyKind::Bipartite,
        StrategyKind::Kmeans,
        StrategyKind::PruneTopk,
        StrategyKind::PruneRandom,
        StrategyKind::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Illava => "illava",
            StrategyKind::Greedy => "greedy",
            StrategyKind::Bipartite => "bipartite",
            StrategyKind::Kmeans => "kmeans",
            StrategyKind::PruneTopk => "prune_topk",
            StrategyKind::PruneRandom => "prune_random",
            StrategyKind::None => "none",
        }
    }

    /// True for strategies that discard tokens instead of folding them in.
    pub fn is_pruning(&self) -> bool {
        matches!(self, StrategyKind::PruneTopk | StrategyKind::PruneRandom)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}' (expected one of illava, greedy, bipartite, \
                     kmeans, prune_topk, prune_random, none)"
                ))
            })
    }
}

/// Strategy selection plus the knobs individual strategies read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Lloyd iterations for the k-means strategy.
    pub kmeans_iters: usize,
    /// Seed for the randomized strategies, mixed with a per-event nonce.
    pub seed: u64,
    /// Weight orientation for the attention-queue merge.
    pub weight_order: WeightOrder,
    /// Denominator convention for LM-stage similarity scores.
    pub lm_denominator: CausalDenominator,
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec {
            kind: StrategyKind::Illava,
            kmeans_iters: 5,
            seed: 0,
            weight_order: WeightOrder::Descending,
            lm_denominator: CausalDenominator::Fixed,
        }
    }
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn merge_options(&self) -> MergeOptions {
        MergeOptions {
            weight_order: self.weight_order,
            lm_denominator: self.lm_denominator,
        }
    }
}

/// The outcome of one reduction event: the shrunken sequence plus the input
/// indices a pruning strategy discarded (empty for merging strategies).
#[derive(Debug, Clone)]
pub struct Reduction {
    pub seq: TokenSeq,
    pub dropped: Vec<usize>,
}

impl Reduction {
    fn merged(seq: TokenSeq) -> Self {
        Reduction {
            seq,
            dropped: Vec::new(),
        }
    }
}

/// Stable per-event seed component so repeated events within one run draw
/// different randomness while runs stay reproducible.
pub fn event_nonce(stage: Stage, frame: usize, block: usize) -> u64 {
    let stage_bits: u64 = match stage {
        Stage::Encoder => 1,
        Stage::Lm => 2,
    };
    (stage_bits << 48) | ((frame as u64) << 24) | block as u64
}

fn mix_seed(seed: u64, nonce: u64) -> u64 {
    seed ^ nonce.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return -1.0;
    }
    dot(a, b) / (na * nb)
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Merges `r` tokens one at a time: each step folds the lowest-scoring
/// surviving token into its nearest cosine neighbor with a lineage-size
/// weighted average. Scores stay fixed for the whole event; the neighbor
/// keeps its own score, position, and tag.
pub fn greedy_merge(seq: &TokenSeq, scores: &SimilarityScores, r: usize) -> Result<TokenSeq> {
    let n = seq.len();
    if scores.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} scores for {n} tokens",
            scores.len()
        )));
    }
    if r == 0 {
        return Ok(seq.clone());
    }
    if r > n.saturating_sub(2) {
        return Err(Error::Schedule(format!(
            "greedy merge of {r} tokens leaves fewer than 2 of {n}"
        )));
    }

    struct Entry {
        orig: usize,
        vec: Vec<f32>,
        score: f32,
        size: usize,
        lineage: BTreeSet<usize>,
    }
    let mut active: Vec<Entry> = (0..n)
        .map(|i| Entry {
            orig: i,
            vec: seq.token(i).to_vec(),
            score: scores.get(i),
            size: seq.lineage()[i].len(),
            lineage: seq.lineage()[i].clone(),
        })
        .collect();

    for _ in 0..r {
        let lowest = active
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then(a.orig.cmp(&b.orig)))
            .map(|(i, _)| i)
            .expect("active list is non-empty");
        let mut neighbor = usize::MAX;
        let mut best = f32::NEG_INFINITY;
        for (j, e) in active.iter().enumerate() {
            if j == lowest {
                continue;
            }
            let sim = cosine(&active[lowest].vec, &e.vec);
            if sim > best || (sim == best && neighbor != usize::MAX && e.orig < active[neighbor].orig) {
                best = sim;
                neighbor = j;
            }
        }
        debug_assert_ne!(neighbor, usize::MAX);
        let low_vec = active[lowest].vec.clone();
        let low_size = active[lowest].size;
        let low_lineage = active[lowest].lineage.clone();

        let nb = &mut active[neighbor];
        let total = (low_size + nb.size) as f32;
        let (wl, wn) = (low_size as f32 / total, nb.size as f32 / total);
        for (o, &v) in nb.vec.iter_mut().zip(&low_vec) {
            *o = wn * *o + wl * v;
        }
        nb.size += low_size;
        nb.lineage.extend(low_lineage);
        active.remove(lowest);
    }

    let rows: Vec<Vec<f32>> = active.iter().map(|e| e.vec.clone()).collect();
    TokenSeq::from_parts(
        Matrix::from_rows(&rows),
        active.iter().map(|e| e.lineage.clone()).collect(),
        active.iter().map(|e| seq.positions()[e.orig]).collect(),
        active.iter().map(|e| seq.span_tags()[e.orig]).collect(),
        seq.origin_len(),
    )
}

/// Splits tokens into alternating subsets A (even index) and B (odd index),
/// lets every A-token propose its most cosine-similar B-token, and merges the
/// `r` highest-similarity proposals into their targets with lineage-size
/// weighted averages. Everything else passes through in original order.
pub fn bipartite_merge(seq: &TokenSeq, r: usize) -> Result<TokenSeq> {
    let n = seq.len();
    if r == 0 {
        return Ok(seq.clone());
    }
    if r > n / 2 {
        return Err(Error::Schedule(format!(
            "bipartite merge capacity is {} for {n} tokens, got r={r}",
            n / 2
        )));
    }
    let b_tokens: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
    // Every A-token proposes its best partner in B.
    let mut edges: Vec<(f32, usize, usize)> = Vec::new();
    for a in (0..n).step_by(2) {
        let mut best: Option<(f32, usize)> = None;
        for &b in &b_tokens {
            let sim = cosine(seq.token(a), seq.token(b));
            let better = match best {
                Option::None => true,
                Some((s, prev)) => sim > s || (sim == s && b < prev),
            };
            if better {
                best = Some((sim, b));
            }
        }
        let (sim, b) = best.expect("B is non-empty when r >= 1");
        edges.push((sim, a, b));
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut absorbed: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut removed = vec![false; n];
    for &(_, a, b) in edges.iter().take(r) {
        absorbed[b].push(a);
        removed[a] = true;
    }

    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n - r);
    let mut lineage = Vec::with_capacity(n - r);
    let mut positions = Vec::with_capacity(n - r);
    let mut tags = Vec::with_capacity(n - r);
    for i in 0..n {
        if removed[i] {
            continue;
        }
        let mut vec = seq.token(i).to_vec();
        let mut line = seq.lineage()[i].clone();
        if !absorbed[i].is_empty() {
            let mut size = line.len() as f32;
            for v in vec.iter_mut() {
                *v *= size;
            }
            for &a in &absorbed[i] {
                let a_size = seq.lineage()[a].len() as f32;
                for (o, &v) in vec.iter_mut().zip(seq.token(a)) {
                    *o += a_size * v;
                }
                size += a_size;
                line.extend(seq.lineage()[a].iter().copied());
            }
            for v in vec.iter_mut() {
                *v /= size;
            }
        }
        rows.push(vec);
        lineage.push(line);
        positions.push(seq.positions()[i]);
        tags.push(seq.span_tags()[i]);
    }
    TokenSeq::from_parts(Matrix::from_rows(&rows), lineage, positions, tags, seq.origin_len())
}

/// Clusters the embeddings into `k = N - r` groups and replaces each group
/// with its centroid. Seeded farthest-ish (D²-sampled) initialization, exactly
/// `iters` Lloyd iterations, empty clusters re-seeded from the globally
/// farthest point. Output tokens are ordered by their smallest member
/// position, which doubles as the centroid's position.
pub fn kmeans_merge(seq: &TokenSeq, r: usize, iters: usize, seed: u64) -> Result<TokenSeq> {
    let n = seq.len();
    if r == 0 {
        return Ok(seq.clone());
    }
    if r >= n {
        return Err(Error::Schedule(format!(
            "k-means needs at least one cluster: r={r} with {n} tokens"
        )));
    }
    if iters == 0 {
        return Err(Error::Config("kmeans_iters must be at least 1".into()));
    }
    let k = n - r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // D²-weighted seeding.
    let mut centers: Vec<Vec<f32>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = (rng.next_u64() % n as u64) as usize;
    chosen[first] = true;
    centers.push(seq.token(first).to_vec());
    let mut d2: Vec<f32> = (0..n).map(|i| dist2(seq.token(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().map(|&d| f64::from(d)).sum();
        let next = if total > 0.0 {
            let mut t = (rng.next_u64() as f64 / u64::MAX as f64) * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                t -= f64::from(d);
                if t <= 0.0 && !chosen[i] {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).rfind(|&i| !chosen[i]).expect("k <= n"))
        } else {
            // All remaining points coincide with a center; take the smallest
            // unchosen index.
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        centers.push(seq.token(next).to_vec());
        for i in 0..n {
            let d = dist2(seq.token(i), centers.last().expect("just pushed"));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // Assign to the nearest center, ties to the smaller center index.
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(seq.token(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        // Re-seed empty clusters from the farthest point of an over-full one.
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&x, &y| {
                    dist2(seq.token(x), &centers[assignment[x]])
                        .total_cmp(&dist2(seq.token(y), &centers[assignment[y]]))
                        .then(y.cmp(&x))
                })
                .expect("pigeonhole: some cluster has more than one member");
            sizes[assignment[far]] -= 1;
            assignment[far] = c;
            sizes[c] = 1;
        }
        // Update centers to member means.
        for (c, center) in centers.iter_mut().enumerate() {
            center.iter_mut().for_each(|v| *v = 0.0);
            let mut count = 0usize;
            for i in 0..n {
                if assignment[i] == c {
                    for (o, &v) in center.iter_mut().zip(seq.token(i)) {
                        *o += v;
                    }
                    count += 1;
                }
            }
            debug_assert!(count > 0);
            let inv = 1.0 / count as f32;
            center.iter_mut().for_each(|v| *v *= inv);
        }
    }

    // One output token per cluster, ordered by smallest member position.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| seq.positions()[members[c][0]]);
    let mut rows = Vec::with_capacity(k);
    let mut lineage = Vec::with_capacity(k);
    let mut positions = Vec::with_capacity(k);
    let mut tags = Vec::with_capacity(k);
    for &c in &order {
        let anchor = members[c][0];
        rows.push(centers[c].clone());
        let mut line = BTreeSet::new();
        for &m in &members[c] {
            line.extend(seq.lineage()[m].iter().copied());
        }
        lineage.push(line);
        positions.push(seq.positions()[anchor]);
        tags.push(seq.span_tags()[anchor]);
    }
    TokenSeq::from_parts(Matrix::from_rows(&rows), lineage, positions, tags, seq.origin_len())
}

/// Drops the `r` lowest-scoring tokens (ties to the smaller index). Returns
/// the kept sequence and the dropped input indices, ascending.
pub fn prune_topk(
    seq: &TokenSeq,
    scores: &SimilarityScores,
    r: usize,
) -> Result<(TokenSeq, Vec<usize>)> {
    let n = seq.len();
    if scores.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} scores for {n} tokens",
            scores.len()
        )));
    }
    if r == 0 {
        return Ok((seq.clone(), Vec::new()));
    }
    if r > n - 1 {
        return Err(Error::Schedule(format!(
            "cannot prune {r} of {n} tokens"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.get(a).total_cmp(&scores.get(b)).then(a.cmp(&b)));
    let mut dropped: Vec<usize> = order[..r].to_vec();
    dropped.sort_unstable();
    let drop_set: BTreeSet<usize> = dropped.iter().copied().collect();
    let kept: Vec<usize> = (0..n).filter(|i| !drop_set.contains(i)).collect();
    Ok((seq.select(&kept)?, dropped))
}

/// Drops `r` uniformly sampled tokens. Returns the kept sequence and the
/// dropped input indices, ascending.
pub fn prune_random(seq: &TokenSeq, r: usize, seed: u64) -> Result<(TokenSeq, Vec<usize>)> {
    let n = seq.len();
    if r == 0 {
        return Ok((seq.clone(), Vec::new()));
    }
    if r > n - 1 {
        return Err(Error::Schedule(format!(
            "cannot prune {r} of {n} tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = rand::seq::index::sample(&mut rng, n, r).into_vec();
    dropped.sort_unstable();
    let drop_set: BTreeSet<usize> = dropped.iter().copied().collect();
    let kept: Vec<usize> = (0..n).filter(|i| !drop_set.contains(i)).collect();
    Ok((seq.select(&kept)?, dropped))
}

/// Runs one reduction event with the configured strategy.
///
/// Encoder stage operates on the whole sequence; LM stage operates on
/// `image_span` only, reassembling the untouched prefix and suffix around the
/// reduced span. `attn` is required by the attention-driven strategies
/// (illava, greedy, prune_topk). Dropped indices in the result are relative
/// to the full input sequence.
pub fn apply_strategy(
    seq: &TokenSeq,
    attn: Option<&AttentionMap>,
    r: usize,
    spec: &StrategySpec,
    stage: Stage,
    image_span: Option<Range<usize>>,
    nonce: u64,
) -> Result<Reduction> {
    spec.validate()?;
    if spec.kind == StrategyKind::None || r == 0 {
        return Ok(Reduction::merged(seq.clone()));
    }
    if spec.kind == StrategyKind::Illava {
        let attn = attn.ok_or_else(|| {
            Error::InvalidInput("strategy 'illava' needs an attention map".into())
        })?;
        let out = merge_step(seq, attn, r, stage, image_span, &spec.merge_options())?;
        return Ok(Reduction::merged(out));
    }

    let span = match stage {
        Stage::Encoder => 0..seq.len(),
        Stage::Lm => image_span.clone().ok_or_else(|| {
            Error::InvalidInput("LM-stage reduction requires an image span".into())
        })?,
    };
    let scores = || -> Result<SimilarityScores> {
        let attn = attn.ok_or_else(|| {
            Error::InvalidInput(format!(
                "strategy '{}' needs an attention map",
                spec.kind
            ))
        })?;
        match stage {
            Stage::Encoder => similarity_encoder(attn),
            Stage::Lm => similarity_lm(attn, span.clone(), spec.lm_denominator),
        }
    };
    let region: Vec<usize> = span.clone().collect();
    let sub = seq.select(&region)?;
    let seed = mix_seed(spec.seed, nonce);

    let (reduced, dropped_rel) = match spec.kind {
        StrategyKind::Greedy => (greedy_merge(&sub, &scores()?, r)?, Vec::new()),
        StrategyKind::Bipartite => (bipartite_merge(&sub, r)?, Vec::new()),
        StrategyKind::Kmeans => (kmeans_merge(&sub, r, spec.kmeans_iters, seed)?, Vec::new()),
        StrategyKind::PruneTopk => {
            let (kept, dropped) = prune_topk(&sub, &scores()?, r)?;
            (kept, dropped)
        }
        StrategyKind::PruneRandom => {
            let (kept, dropped) = prune_random(&sub, r, seed)?;
            (kept, dropped)
        }
        StrategyKind::Illava | StrategyKind::None => unreachable!("handled above"),
    };

    let seq = splice(seq, span.clone(), &reduced)?;
    let dropped = dropped_rel.into_iter().map(|i| span.start + i).collect();
    Ok(Reduction { seq, dropped })
}

/// Rebuilds a sequence with `span` replaced by `replacement`, preserving the
/// untouched prefix and suffix.
fn splice(seq: &TokenSeq, span: Range<usize>, replacement: &TokenSeq) -> Result<TokenSeq> {
    if span == (0..seq.len()) {
        return Ok(replacement.clone());
    }
    let out_len = seq.len() - span.len() + replacement.len();
    let dim = seq.dim();
    let mut tokens = Vec::with_capacity(out_len * dim);
    let mut lineage = Vec::with_capacity(out_len);
    let mut positions = Vec::with_capacity(out_len);
    let mut tags = Vec::with_capacity(out_len);
    for i in 0..span.start {
        tokens.extend_from_slice(seq.token(i));
        lineage.push(seq.lineage()[i].clone());
        positions.push(seq.positions()[i]);
        tags.push(seq.span_tags()[i]);
    }
    tokens.extend_from_slice(replacement.tokens().data());
    lineage.extend(replacement.lineage().iter().cloned());
    positions.extend_from_slice(replacement.positions());
    tags.extend_from_slice(replacement.span_tags());
    for i in span.end..seq.len() {
        tokens.extend_from_slice(seq.token(i));
        lineage.push(seq.lineage()[i].clone());
        positions.push(seq.positions()[i]);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::SpanTag;
    use rand::Rng;

    fn seq_from_rows(rows: &[Vec<f32>]) -> TokenSeq {
        TokenSeq::from_embeddings(Matrix::from_rows(rows), SpanTag::Image).unwrap()
    }

    fn random_seq(n: usize, dim: usize, seed: u64) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSeq::from_embeddings(Matrix::randn(n, dim, 1.0, &mut rng), SpanTag::Image).unwrap()
    }

    fn uniform_scores(n: usize) -> SimilarityScores {
        SimilarityScores::new(vec![0.5; n]).unwrap()
    }

    #[test]
    fn greedy_merges_the_identical_pair() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.6, 0.8],
            vec![0.6, 0.8],
        ];
        let seq = seq_from_rows(&rows);
        // Token 2 has the lowest score, so it merges first; its nearest
        // cosine neighbor is its duplicate, token 3.
        let scores = SimilarityScores::new(vec![0.9, 0.8, 0.1, 0.7]).unwrap();
        let out = greedy_merge(&seq, &scores, 1).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.lineage()[2], BTreeSet::from([2, 3]));
        assert!((out.token(2)[0] - 0.6).abs() < 1e-6);
        assert!((out.token(2)[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn greedy_matches_a_step_simulation_oracle() {
        // Scalar-like embeddings so cosine degenerates to sign agreement and
        // the trajectory is easy to simulate independently.
        let rows = vec![vec![4.0, 1.0], vec![3.9, 1.1], vec![-2.0, 5.0], vec![-2.1, 4.9]];
        let seq = seq_from_rows(&rows);
        let scores = SimilarityScores::new(vec![0.2, 0.3, 0.1, 0.4]).unwrap();
        let out = greedy_merge(&seq, &scores, 2).unwrap();
        assert_eq!(out.len(), 2);
        // Step 1: token 2 (score .1) merges into token 3 (cos ~1) -> mean.
        // Step 2: token 0 (score .2) merges into token 1 -> mean.
        assert_eq!(out.lineage()[0], BTreeSet::from([0, 1]));
        assert_eq!(out.lineage()[1], BTreeSet::from([2, 3]));
        assert!((out.token(0)[0] - 3.95).abs() < 1e-6);
        assert!((out.token(1)[0] - (-2.05)).abs() < 1e-6);
    }

    #[test]
    fn greedy_size_weights_follow_lineage() {
        // First merge makes a size-2 token; merging into it again must weight
        // 2:1, not 1:1.
        let rows = vec![vec![3.0], vec![3.0], vec![9.0], vec![100.0]];
        let seq = seq_from_rows(&rows);
        let scores = SimilarityScores::new(vec![0.1, 0.2, 0.3, 0.9]).unwrap();
        let out = greedy_merge(&seq, &scores, 2).unwrap();
        assert_eq!(out.len(), 2);
        // (3+3)/2 = 3, then (2*3 + 1*9)/3 = 5.
        assert!((out.token(0)[0] - 5.0).abs() < 1e-5);
        assert_eq!(out.lineage()[0], BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn bipartite_zero_is_identity_and_duplicates_merge_first() {
        let seq = random_seq(6, 3, 1);
        let same = bipartite_merge(&seq, 0).unwrap();
        assert_eq!(same.tokens().data(), seq.tokens().data());

        let rows = vec![
            vec![5.0, 0.0],
            vec![5.0, 0.0],
            vec![0.0, 3.0],
            vec![-1.0, -1.0],
        ];
        let seq = seq_from_rows(&rows);
        let out = bipartite_merge(&seq, 1).unwrap();
        assert_eq!(out.len(), 3);
        // Tokens 0 (A) and 1 (B) are identical: that edge has cosine 1.
        assert_eq!(out.lineage()[0], BTreeSet::from([0, 1]));
        assert!((out.token(0)[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn bipartite_matches_a_best_edges_oracle() {
        let seq = random_seq(6, 4, 42);
        let r = 2;
        let out = bipartite_merge(&seq, r).unwrap();

        // Independent re-derivation: best B-partner per A-token, top-r edges
        // by similarity, size-weighted group means.
        let mut edges = Vec::new();
        for a in [0usize, 2, 4] {
            let mut best = (f32::NEG_INFINITY, usize::MAX);
            for b in [1usize, 3, 5] {
                let sim = cosine(seq.token(a), seq.token(b));
                if sim > best.0 {
                    best = (sim, b);
                }
            }
            edges.push((best.0, a, best.1));
        }
        edges.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut groups: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let mut gone = [false; 6];
        for &(_, a, b) in edges.iter().take(r) {
            groups[b].push(a);
            gone[a] = true;
        }
        let expected: Vec<Vec<f32>> = (0..6)
            .filter(|&i| !gone[i])
            .map(|i| {
                let members = &groups[i];
                let mut v = vec![0.0f32; 4];
                for &m in members {
                    for (o, &x) in v.iter_mut().zip(seq.token(m)) {
                        *o += x;
                    }
                }
                v.iter_mut().for_each(|x| *x /= members.len() as f32);
                v
            })
            .collect();
        assert_eq!(out.len(), expected.len());
        for (i, exp) in expected.iter().enumerate() {
            for (a, b) in out.token(i).iter().zip(exp) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bipartite_rejects_over_capacity() {
        let seq = random_seq(6, 3, 2);
        assert_eq!(bipartite_merge(&seq, 4).unwrap_err().kind(), "schedule");
    }

    #[test]
    fn kmeans_with_all_clusters_is_identity() {
        let seq = random_seq(7, 3, 3);
        let out = kmeans_merge(&seq, 0, 5, 9).unwrap();
        assert_eq!(out.tokens().data(), seq.tokens().data());
    }

    #[test]
    fn kmeans_recovers_well_separated_groups() {
        let rows = vec![
            vec![10.0, 10.0],
            vec![-10.0, -10.0],
            vec![10.0, 10.0],
            vec![-10.0, -10.0],
        ];
        let seq = seq_from_rows(&rows);
        let out = kmeans_merge(&seq, 2, 5, 7).unwrap();
        assert_eq!(out.len(), 2);
        out.check_lineage_partition().unwrap();
        let mut captured: Vec<Vec<f32>> = (0..2).map(|i| out.token(i).to_vec()).collect();
        captured.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(captured[0], vec![-10.0, -10.0]);
        assert_eq!(captured[1], vec![10.0, 10.0]);
    }

    #[test]
    fn kmeans_matches_a_reference_lloyd_loop() {
        let seq = random_seq(8, 2, 21);
        let (r, iters, seed) = (3usize, 5usize, 77u64);
        let out = kmeans_merge(&seq, r, iters, seed).unwrap();

        // Reference: replay the same protocol with an independent loop.
        let n = 8;
        let k = n - r;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers: Vec<Vec<f32>> = Vec::new();
        let mut chosen = vec![false; n];
        let first = (rng.next_u64() % n as u64) as usize;
        chosen[first] = true;
        centers.push(seq.token(first).to_vec());
        let mut d2: Vec<f32> = (0..n).map(|i| dist2(seq.token(i), &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().map(|&d| f64::from(d)).sum();
            let mut t = (rng.next_u64() as f64 / u64::MAX as f64) * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                t -= f64::from(d);
                if t <= 0.0 && !chosen[i] {
                    pick = Some(i);
                    break;
                }
            }
            let next = pick.unwrap_or_else(|| (0..n).rfind(|&i| !chosen[i]).unwrap());
            chosen[next] = true;
            centers.push(seq.token(next).to_vec());
            for i in 0..n {
                d2[i] = d2[i].min(dist2(seq.token(i), centers.last().unwrap()));
            }
        }
        let mut assignment = vec![0usize; n];
        for _ in 0..iters {
            for i in 0..n {
                let mut best = (f32::INFINITY, 0usize);
                for (c, center) in centers.iter().enumerate() {
                    let d = dist2(seq.token(i), center);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                assignment[i] = best.1;
            }
            let mut sizes = vec![0usize; k];
            assignment.iter().for_each(|&a| sizes[a] += 1);
            for c in 0..k {
                if sizes[c] == 0 {
                    let far = (0..n)
                        .filter(|&i| sizes[assignment[i]] > 1)
                        .max_by(|&x, &y| {
                            dist2(seq.token(x), &centers[assignment[x]])
                                .total_cmp(&dist2(seq.token(y), &centers[assignment[y]]))
                                .then(y.cmp(&x))
                        })
                        .unwrap();
                    sizes[assignment[far]] -= 1;
                    assignment[far] = c;
                    sizes[c] = 1;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                center.iter_mut().for_each(|v| *v = 0.0);
                let mut count = 0;
                for i in 0..n {
                    if assignment[i] == c {
                        for (o, &v) in center.iter_mut().zip(seq.token(i)) {
                            *o += v;
                        }
                        count += 1;
                    }
                }
                center.iter_mut().for_each(|v| *v /= count as f32);
            }
        }
        let mut expected: Vec<Vec<f32>> = centers;
        expected.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let mut got: Vec<Vec<f32>> = (0..out.len()).map(|i| out.token(i).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            for (a, b) in g.iter().zip(e) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn prune_topk_drops_lowest_scores() {
        let seq = random_seq(3, 2, 4);
        let scores = SimilarityScores::new(vec![0.9, 0.1, 0.8]).unwrap();
        let (kept, dropped) = prune_topk(&seq, &scores, 1).unwrap();
        assert_eq!(dropped, vec![1]);
        assert_eq!(kept.positions(), &[0, 2]);
    }

    #[test]
    fn prune_random_is_seed_deterministic() {
        let seq = random_seq(20, 3, 5);
        let (a, da) = prune_random(&seq, 7, 99).unwrap();
        let (b, db) = prune_random(&seq, 7, 99).unwrap();
        assert_eq!(da, db);
        assert_eq!(a.tokens().data(), b.tokens().data());
        let (_, dc) = prune_random(&seq, 7, 100).unwrap();
        assert_ne!(da, dc);
    }

    #[test]
    fn prune_mirrors_the_default_encoder_budget() {
        let seq = random_seq(729, 2, 6);
        let scores =
            SimilarityScores::new((0..729).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
        let (kept, dropped) = prune_topk(&seq, &scores, 368).unwrap();
        assert_eq!(kept.len(), 361);
        assert_eq!(dropped.len(), 368);
        // Kept and discarded partition the original indices.
        let mut all: BTreeSet<usize> = kept.coverage();
        all.extend(dropped.iter().copied());
        assert_eq!(all.len(), 729);
    }

    #[test]
    fn apply_strategy_splices_lm_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = Matrix::randn(2, 4, 1.0, &mut rng);
        let img = Matrix::randn(8, 4, 1.0, &mut rng);
        let ins = Matrix::randn(2, 4, 1.0, &mut rng);
        let seq = TokenSeq::lm_prompt(&sys, &img, &ins).unwrap();
        let span = seq.image_span().unwrap();
        for kind in [StrategyKind::Bipartite, StrategyKind::Kmeans, StrategyKind::PruneRandom] {
            let spec = StrategySpec { kind, ..StrategySpec::default() };
            let out = apply_strategy(&seq, None, 3, &spec, Stage::Lm, Some(span.clone()), 7)
                .unwrap();
            assert_eq!(out.seq.len(), seq.len() - 3, "{kind}");
            assert_eq!(out.seq.span_tags()[..2], [SpanTag::System, SpanTag::System]);
            let images = out
                .seq
                .span_tags()
                .iter()
                .filter(|t| **t == SpanTag::Image)
                .count();
            assert_eq!(images, 5, "{kind}");
        }
    }

    #[test]
    fn none_strategy_is_identity() {
        let seq = random_seq(9, 3, 10);
        let spec = StrategySpec { kind: StrategyKind::None, ..StrategySpec::default() };
        let out = apply_strategy(&seq, None, 4, &spec, Stage::Encoder, None, 0).unwrap();
        assert_eq!(out.seq.tokens().data(), seq.tokens().data());
        assert!(out.dropped.is_empty());
    }

    #[test]
    fn strategy_names_round_trip() {
        for kind in StrategyKind::ALL {
            assert_eq!(kind.as_str().parse::<StrategyKind>().unwrap(), kind);
        }
        assert!("fancy".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn all_strategies_reduce_by_exactly_r() {
        let seq = random_seq(24, 6, 11);
        // Row-stochastic bidirectional map from softmaxed random logits.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut probs = Matrix::zeros(24, 24);
        for q in 0..24 {
            let mut row: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            crate::linalg::softmax_prefix(&mut row, 24);
            probs.row_mut(q).copy_from_slice(&row);
        }
        let attn = AttentionMap::new(vec![probs], false).unwrap();
        for kind in StrategyKind::ALL {
            if kind == StrategyKind::None {
                continue;
            }
            let spec = StrategySpec { kind, ..StrategySpec::default() };
            let out =
                apply_strategy(&seq, Some(&attn), 5, &spec, Stage::Encoder, None, 3).unwrap();
            assert_eq!(out.seq.len(), 19, "{kind}");
            assert!(out.seq.tokens().is_finite(), "{kind}");
            if kind.is_pruning() {
                let mut all = out.seq.coverage();
                for &d in &out.dropped {
                    assert!(all.insert(d), "dropped {d} overlaps kept lineage");
                }
                assert_eq!(all.len(), 24, "{kind}");
            } else {
                out.seq.check_lineage_partition().unwrap();
            }
        }
    }
}
