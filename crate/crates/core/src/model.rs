//! A deterministic, seeded vision-encoder → projector → causal-LM forward
//! pass with reduction hooks.
//!
//! Blocks are pre-norm attention + GELU MLP (hidden width 2×dim). The encoder
//! is bidirectional with a learned positional table added once at the input;
//! the LM is causal with rotary position handling indexed by each token's
//! ORIGINAL position, so merged prompts keep their surviving tokens'
//! positions without recomputation. Every matrix product is tallied into
//! multiply-accumulate counters at its call site, so the counters report
//! exactly what was executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::baselines::{apply_strategy, event_nonce};
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_prefix, LayerNorm, Matrix};
use crate::merge::Stage;
use crate::schedule::MergeSchedule;
use crate::tokens::{SpanTag, TokenSeq};
use crate::trace::{cells_from_seq, CellState, KvCacheStats, MacCounts, MergeEvent, StageTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_grid: (usize, usize),
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            layers: 12,
            dim: 64,
            heads: 4,
            patch_grid: (27, 27),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorDims {
    pub out_dim: usize,
}

impl Default for ProjectorDims {
    fn default() -> Self {
        ProjectorDims { out_dim: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmDims {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        LmDims {
            layers: 8,
            dim: 128,
            heads: 8,
            vocab: 256,
        }
    }
}

/// Shape of the whole pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub encoder: EncoderDims,
    pub projector: ProjectorDims,
    pub lm: LmDims,
}

impl ModelDims {
    /// Encoder token count, fixed by the patch grid.
    pub fn encoder_tokens(&self) -> usize {
        self.encoder.patch_grid.0 * self.encoder.patch_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let l = &self.lm;
        if e.layers == 0 || e.dim == 0 || e.heads == 0 || l.layers == 0 || l.dim == 0
            || l.heads == 0 || l.vocab == 0 || self.projector.out_dim == 0
        {
            return Err(Error::Config("model dims must all be nonzero".into()));
        }
        if e.patch_grid.0 == 0 || e.patch_grid.1 == 0 || self.encoder_tokens() < 2 {
            return Err(Error::Config(format!(
                "patch grid {}x{} needs at least 2 patches",
                e.patch_grid.0, e.patch_grid.1
            )));
        }
        if e.dim % e.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                e.dim, e.heads
            )));
        }
        if l.dim % l.heads != 0 {
            return Err(Error::Config(format!(
                "lm dim {} not divisible by {} heads",
                l.dim, l.heads
            )));
        }
        if (l.dim / l.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "lm head width {} must be even for rotary pairs",
                l.dim / l.heads
            )));
        }
        if self.projector.out_dim != l.dim {
            return Err(Error::Config(format!(
                "projector out_dim {} must match lm dim {}",
                self.projector.out_dim, l.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2: LayerNorm,
    w1: Matrix,
    w2: Matrix,
}

impl Block {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std_d = 1.0 / (dim as f32).sqrt();
        let hidden = 2 * dim;
        let std_h = 1.0 / (hidden as f32).sqrt();
        Block {
            ln1: LayerNorm::new(dim),
            wq: Matrix::randn(dim, dim, std_d, rng),
            wk: Matrix::randn(dim, dim, std_d, rng),
            wv: Matrix::randn(dim, dim, std_d, rng),
            wo: Matrix::randn(dim, dim, std_d, rng),
            ln2: LayerNorm::new(dim),
            w1: Matrix::randn(dim, hidden, std_d, rng),
            w2: Matrix::randn(hidden, dim, std_h, rng),
        }
    }
}

/// All pipeline weights. Immutable after build; shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    enc_pos: Matrix,
    enc_blocks: Vec<Block>,
    projector: Matrix,
    lm_blocks: Vec<Block>,
    lm_final_ln: LayerNorm,
    embed: Matrix,
    lm_head: Matrix,
}

/// Builds every weight from one seeded generator; the same `(dims, seed)`
/// pair always yields bit-identical weights.
pub fn build_model(dims: &ModelDims, seed: u64) -> Result<Model> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = &dims.encoder;
    let l = &dims.lm;
    let enc_blocks = (0..e.layers).map(|_| Block::random(e.dim, &mut rng)).collect();
    let enc_pos = Matrix::randn(dims.encoder_tokens(), e.dim, 1.0, &mut rng);
    let projector = Matrix::randn(e.dim, dims.projector.out_dim, 1.0 / (e.dim as f32).sqrt(), &mut rng);
    let lm_blocks = (0..l.layers).map(|_| Block::random(l.dim, &mut rng)).collect();
    let embed = Matrix::randn(l.vocab, l.dim, 1.0, &mut rng);
    let lm_head = Matrix::randn(l.dim, l.vocab, 1.0 / (l.dim as f32).sqrt(), &mut rng);
    Ok(Model {
        dims: *dims,
        enc_pos,
        enc_blocks,
        projector,
        lm_blocks,
        lm_final_ln: LayerNorm::new(l.dim),
        embed,
        lm_head,
    })
}

fn mm(a: &Matrix, b: &Matrix, acc: &mut u64) -> Matrix {
    *acc += (a.rows() * a.cols() * b.cols()) as u64;
    a.matmul(b)
}

fn mm_nt(a: &Matrix, b: &Matrix, acc: &mut u64) -> Matrix {
    *acc += (a.rows() * b.rows() * a.cols()) as u64;
    a.matmul_nt(b)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

fn gelu_in_place(m: &mut Matrix) {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    for v in m.data_mut() {
        let x = *v;
        *v = 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh());
    }
}

/// Rotates query/key pairs by each token's original position index.
fn rope_in_place(m: &mut Matrix, positions: &[usize], heads: usize) {
    let dim = m.cols();
    let hd = dim / heads;
    let half = hd / 2;
    let inv_freq: Vec<f32> = (0..half)
        .map(|p| 10000f32.powf(-2.0 * p as f32 / hd as f32))
        .collect();
    for i in 0..m.rows() {
        let pos = positions[i] as f32;
        let row = m.row_mut(i);
        for h in 0..heads {
            let base = h * hd;
            for (p, &freq) in inv_freq.iter().enumerate() {
                let (s, c) = (pos * freq).sin_cos();
                let a = row[base + 2 * p];
                let b = row[base + 2 * p + 1];
                row[base + 2 * p] = a * c - b * s;
                row[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

/// One pre-norm block pass. Returns the block output, the post-softmax
/// per-head attention (when `capture`), and the post-rotary key/value
/// matrices for caching.
fn block_forward(
    block: &Block,
    x: &Matrix,
    heads: usize,
    positions: Option<&[usize]>,
    causal: bool,
    capture: bool,
    macs: &mut MacCounts,
) -> (Matrix, Option<Vec<Matrix>>, (Matrix, Matrix)) {
    let n = x.rows();
    let dim = x.cols();
    let hd = dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let h = block.ln1.apply(x);
    let mut q = mm(&h, &block.wq, &mut macs.proj);
    let mut k = mm(&h, &block.wk, &mut macs.proj);
    let v = mm(&h, &block.wv, &mut macs.proj);
    if let Some(pos) = positions {
        rope_in_place(&mut q, pos, heads);
        rope_in_place(&mut k, pos, heads);
    }

    let mut ctx = Matrix::zeros(n, dim);
    let mut captured: Option<Vec<Matrix>> = capture.then(Vec::new);
    for head in 0..heads {
        let qh = q.column_band(head * hd, hd);
        let kh = k.column_band(head * hd, hd);
        let vh = v.column_band(head * hd, hd);
        let mut scores = mm_nt(&qh, &kh, &mut macs.attn);
        for i in 0..n {
            let row = scores.row_mut(i);
            for val in row.iter_mut() {
                *val *= scale;
            }
            let visible = if causal { i + 1 } else { n };
            softmax_prefix(row, visible);
        }
        let ctx_h = mm(&scores, &vh, &mut macs.attn);
        for i in 0..n {
            ctx.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(ctx_h.row(i));
        }
        if let Some(maps) = captured.as_mut() {
            maps.push(scores);
        }
    }
    let attn_out = mm(&ctx, &block.wo, &mut macs.proj);
    let x1 = add(x, &attn_out);

    let h2 = block.ln2.apply(&x1);
    let mut m1 = mm(&h2, &block.w1, &mut macs.proj);
    gelu_in_place(&mut m1);
    let m2 = mm(&m1, &block.w2, &mut macs.proj);
    (add(&x1, &m2), captured, (k, v))
}

/// Runs the image encoder over one frame, reducing after each scheduled
/// block. Returns the (possibly reduced) output sequence and the stage trace.
pub fn encoder_forward(
    model: &Model,
    image_tokens: &TokenSeq,
    schedule: &MergeSchedule,
    frame: usize,
) -> Result<(TokenSeq, StageTrace)> {
    let dims = &model.dims.encoder;
    let n0 = model.dims.encoder_tokens();
    if image_tokens.len() != n0 {
        return Err(Error::InvalidInput(format!(
            "encoder expects {n0} tokens (patch grid {}x{}), got {}",
            dims.patch_grid.0,
            dims.patch_grid.1,
            image_tokens.len()
        )));
    }
    if image_tokens.dim() != dims.dim {
        return Err(Error::InvalidInput(format!(
            "encoder expects width {}, got {}",
            dims.dim,
            image_tokens.dim()
        )));
    }
    let (r_v, _) = schedule.effective_reductions();
    if r_v > 0 && schedule.encoder_output_len(n0) < 2 {
        return Err(Error::Schedule(format!(
            "schedule.r_v={r_v} over {} layers exhausts the {n0}-token frame",
            schedule.encoder_layers.len()
        )));
    }

    let mut x = image_tokens.tokens().clone();
    for i in 0..x.rows() {
        let pos = image_tokens.positions()[i];
        let row = x.row_mut(i);
        for (o, &p) in row.iter_mut().zip(model.enc_pos.row(pos)) {
            *o += p;
        }
    }
    let mut seq = image_tokens.with_tokens(x)?;
    let mut macs = MacCounts::default();
    let mut block_counts = Vec::with_capacity(dims.layers + 1);
    let mut events = Vec::new();
    for b in 1..=dims.layers {
        block_counts.push(seq.len());
        let hook = schedule.encoder_reduces_at(b);
        let (out, probs, _) = block_forward(
            &model.enc_blocks[b - 1],
            seq.tokens(),
            dims.heads,
            None,
            false,
            hook,
            &mut macs,
        );
        seq = seq.with_tokens(out)?;
        if hook {
            let attn = AttentionMap::new(probs.expect("captured at hook"), false)?;
            let pre_len = seq.len();
            let reduction = apply_strategy(
                &seq,
                Some(&attn),
                r_v,
                &schedule.strategy,
                Stage::Encoder,
                None,
                event_nonce(Stage::Encoder, frame, b),
            )?;
            seq = reduction.seq;
            events.push(MergeEvent {
                stage: Stage::Encoder,
                frame: Some(frame),
                block: b,
                r: r_v,
                pre_len,
                post_len: seq.len(),
                cells: cells_from_seq(&seq),
            });
        }
    }
    block_counts.push(seq.len());
    Ok((seq, StageTrace { block_counts, events, macs }))
}

/// Projects encoder outputs into the LM embedding width.
pub fn project(model: &Model, encoder_out: &Matrix) -> Result<(Matrix, MacCounts)> {
    if encoder_out.cols() != model.dims.encoder.dim {
        return Err(Error::InvalidInput(format!(
            "projector expects width {}, got {}",
            model.dims.encoder.dim,
            encoder_out.cols()
        )));
    }
    let mut macs = MacCounts::default();
    let out = mm(encoder_out, &model.projector, &mut macs.proj);
    Ok((out, macs))
}

/// Maps concatenated encoder-output tokens back to original patches, for
/// translating LM-stage reductions into patch-grid masks.
#[derive(Debug, Clone)]
pub struct ImageProvenance {
    /// Global patch indices accounted for by each encoder-output token.
    pub patches: Vec<Vec<usize>>,
    /// Global anchor patch of each encoder-output token.
    pub reps: Vec<usize>,
    pub patches_per_frame: usize,
    pub frames: usize,
}

impl ImageProvenance {
    /// Provenance of per-frame encoder outputs concatenated in frame order.
    pub fn from_frames(frames: &[TokenSeq], patches_per_frame: usize) -> Self {
        let mut patches = Vec::new();
        let mut reps = Vec::new();
        for (f, seq) in frames.iter().enumerate() {
            let offset = f * patches_per_frame;
            for i in 0..seq.len() {
                patches.push(seq.lineage()[i].iter().map(|&p| offset + p).collect());
                reps.push(offset + seq.positions()[i]);
            }
        }
        ImageProvenance {
            patches,
            reps,
            patches_per_frame,
            frames: frames.len(),
        }
    }

    /// Trivial provenance: token `i` is patch `i` of a single frame.
    pub fn identity(n: usize) -> Self {
        ImageProvenance {
            patches: (0..n).map(|i| vec![i]).collect(),
            reps: (0..n).collect(),
            patches_per_frame: n,
            frames: 1,
        }
    }

    pub fn total_patches(&self) -> usize {
        self.patches_per_frame * self.frames
    }
}

/// Translates a reduced LM prompt into cumulative patch states: each image
/// token folds its constituents' patches onto its anchor's representative
/// patch; image tokens that vanished leave their patches dropped.
fn lm_event_cells(
    post: &TokenSeq,
    span0: std::ops::Range<usize>,
    prov: &ImageProvenance,
) -> Vec<CellState> {
    let mut cells = vec![CellState::Dropped; prov.total_patches()];
    for (i, set) in post.lineage().iter().enumerate() {
        if post.span_tags()[i] != SpanTag::Image {
            continue;
        }
        let anchor_rel = post.positions()[i] - span0.start;
        let anchor_patch = prov.reps[anchor_rel] as u32;
        for &src in set {
            if !span0.contains(&src) {
                continue;
            }
            for &p in &prov.patches[src - span0.start] {
                cells[p] = if p as u32 == anchor_patch {
                    CellState::Kept
                } else {
                    CellState::MergedInto(anchor_patch)
                };
            }
        }
    }
    cells
}

/// Per-block key/value cache from prefill, extended during decode.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub k: Matrix,
    pub v: Matrix,
}

/// Everything decode needs: caches, the logits of the last prompt token, and
/// the next original position index.
#[derive(Debug, Clone)]
pub struct PrefillState {
    pub caches: Vec<BlockCache>,
    pub last_logits: Vec<f32>,
    pub next_pos: usize,
    pub seq: TokenSeq,
}

/// Runs the causal LM over `[system, image, instruction]`, reducing the image
/// span after the scheduled block. Blocks at or before that one cache the
/// full prompt; later blocks cache the reduced one.
pub fn lm_prefill(
    model: &Model,
    system: &Matrix,
    image: &Matrix,
    instruction: &Matrix,
    schedule: &MergeSchedule,
    provenance: Option<&ImageProvenance>,
) -> Result<(PrefillState, KvCacheStats, StageTrace)> {
    let dims = &model.dims.lm;
    let mut seq = TokenSeq::lm_prompt(system, image, instruction)?;
    if seq.dim() != dims.dim {
        return Err(Error::InvalidInput(format!(
            "lm expects width {}, got {}",
            dims.dim,
            seq.dim()
        )));
    }
    let span0 = seq.image_span()?;
    let (_, r_t) = schedule.effective_reductions();
    if r_t > 0 {
        if r_t + 2 > span0.len() {
            return Err(Error::Schedule(format!(
                "schedule.r_t={r_t} too large for an image span of {} (needs r_t <= {})",
                span0.len(),
                span0.len().saturating_sub(2)
            )));
        }
        if schedule.lm_layer < 1 || schedule.lm_layer > dims.layers {
            return Err(Error::Schedule(format!(
                "schedule.lm_layer {} outside [1, {}]",
                schedule.lm_layer, dims.layers
            )));
        }
    }
    let identity;
    let prov = match provenance {
        Some(p) => p,
        Option::None => {
            identity = ImageProvenance::identity(span0.len());
            &identity
        }
    };
    if prov.patches.len() != span0.len() {
        return Err(Error::InvalidInput(format!(
            "provenance covers {} image tokens, span has {}",
            prov.patches.len(),
            span0.len()
        )));
    }

    let mut macs = MacCounts::default();
    let mut block_counts = Vec::with_capacity(dims.layers + 1);
    let mut events = Vec::new();
    let mut caches = Vec::with_capacity(dims.layers);
    for b in 1..=dims.layers {
        block_counts.push(seq.len());
        let hook = schedule.lm_reduces_at(b);
        let (out, probs, (k, v)) = block_forward(
            &model.lm_blocks[b - 1],
            seq.tokens(),
            dims.heads,
            Some(seq.positions()),
            true,
            hook,
            &mut macs,
        );
        caches.push(BlockCache { k, v });
        seq = seq.with_tokens(out)?;
        if hook {
            let attn = AttentionMap::new(probs.expect("captured at hook"), true)?;
            let pre_len = seq.len();
            let reduction = apply_strategy(
                &seq,
                Some(&attn),
                r_t,
                &schedule.strategy,
                Stage::Lm,
                Some(span0.clone()),
                event_nonce(Stage::Lm, 0, b),
            )?;
            seq = reduction.seq;
            events.push(MergeEvent {
                stage: Stage::Lm,
                frame: Option::None,
                block: b,
                r: r_t,
                pre_len,
                post_len: seq.len(),
                cells: lm_event_cells(&seq, span0.clone(), prov),
            });
        }
    }
    block_counts.push(seq.len());

    let last = seq.len() - 1;
    let mut normed = vec![0.0f32; dims.dim];
    model.lm_final_ln.apply_row(seq.token(last), &mut normed);
    let h_last = Matrix::from_vec(1, dims.dim, normed);
    let logits = mm(&h_last, &model.lm_head, &mut macs.proj);

    let per_block_tokens: Vec<usize> = caches.iter().map(|c| c.k.rows()).collect();
    let bytes = per_block_tokens
        .iter()
        .map(|&t| 2 * t as u64 * dims.dim as u64 * 4)
        .sum();
    let stats = KvCacheStats { per_block_tokens, bytes };
    let state = PrefillState {
        caches,
        last_logits: logits.row(0).to_vec(),
        next_pos: seq.origin_len(),
        seq,
    };
    Ok((state, stats, StageTrace { block_counts, events, macs }))
}

/// Greedy decode: each step appends the argmax token (ties to the smaller
/// id), attending over the cached keys/values plus itself.
pub fn lm_decode(
    model: &Model,
    state: &mut PrefillState,
    n_steps: usize,
) -> Result<(Vec<u32>, MacCounts)> {
    let dims = &model.dims.lm;
    let heads = dims.heads;
    let hd = dims.dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut macs = MacCounts::default();
    let mut ids = Vec::with_capacity(n_steps);

    for t in 0..n_steps {
        let id = argmax(&state.last_logits);
        ids.push(id as u32);
        let pos = state.next_pos + t;
        let mut x = Matrix::from_vec(1, dims.dim, model.embed.row(id).to_vec());
        for (block, cache) in model.lm_blocks.iter().zip(state.caches.iter_mut()) {
            let h = block.ln1.apply(&x);
            let mut q = mm(&h, &block.wq, &mut macs.proj);
            let mut k = mm(&h, &block.wk, &mut macs.proj);
            let v = mm(&h, &block.wv, &mut macs.proj);
            rope_in_place(&mut q, &[pos], heads);
            rope_in_place(&mut k, &[pos], heads);
            cache.k.push_row(k.row(0));
            cache.v.push_row(v.row(0));
            let len = cache.k.rows();

            let mut ctx = vec![0.0f32; dims.dim];
            for head in 0..heads {
                let band = head * hd..(head + 1) * hd;
                let qh = &q.row(0)[band.clone()];
                let mut scores: Vec<f32> = (0..len)
                    .map(|j| dot(qh, &cache.k.row(j)[band.clone()]) * scale)
                    .collect();
                macs.attn += (len * hd) as u64;
                softmax_prefix(&mut scores, len);
                for (j, &w) in scores.iter().enumerate() {
                    let vh = &cache.v.row(j)[band.clone()];
                    for (o, &vv) in ctx[band.clone()].iter_mut().zip(vh) {
                        *o += w * vv;
                    }
                }
                macs.attn += (len * hd) as u64;
            }
            let ctx_m = Matrix::from_vec(1, dims.dim, ctx);
            let attn_out = mm(&ctx_m, &block.wo, &mut macs.proj);
            let x1 = add(&x, &attn_out);
            let h2 = block.ln2.apply(&x1);
            let mut m1 = mm(&h2, &block.w1, &mut macs.proj);
            gelu_in_place(&mut m1);
            let m2 = mm(&m1, &block.w2, &mut macs.proj);
            x = add(&x1, &m2);
        }
        let hx = model.lm_final_ln.apply(&x);
        let logits = mm(&hx, &model.lm_head, &mut macs.proj);
        state.last_logits = logits.row(0).to_vec();
    }
    Ok((ids, macs))
}

fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Encoder pass with no reduction machinery at all; fidelity reference.
pub fn encoder_plain_forward(model: &Model, image_tokens: &TokenSeq) -> Result<Matrix> {
    let dims = &model.dims.encoder;
    let n0 = model.dims.encoder_tokens();
    if image_tokens.len() != n0 || image_tokens.dim() != dims.dim {
        return Err(Error::InvalidInput("frame shape mismatch".into()));
    }
    let mut x = image_tokens.tokens().clone();
    for i in 0..x.rows() {
        let pos = image_tokens.positions()[i];
        let row = x.row_mut(i);
        for (o, &p) in row.iter_mut().zip(model.enc_pos.row(pos)) {
            *o += p;
        }
    }
    let mut macs = MacCounts::default();
    for block in &model.enc_blocks {
        let (out, _, _) = block_forward(block, &x, dims.heads, None, false, false, &mut macs);
        x = out;
    }
    if !x.is_finite() {
        return Err(Error::DegenerateInput("encoder activations diverged".into()));
    }
    Ok(x)
}

/// Causal pass with no reduction machinery; returns the last token's logits.
pub fn lm_plain_last_logits(
    model: &Model,
    system: &Matrix,
    image: &Matrix,
    instruction: &Matrix,
) -> Result<Vec<f32>> {
    let dims = &model.dims.lm;
    let seq = TokenSeq::lm_prompt(system, image, instruction)?;
    if seq.dim() != dims.dim {
        return Err(Error::InvalidInput("prompt width mismatch".into()));
    }
    let mut x = seq.tokens().clone();
    let mut macs = MacCounts::default();
    for block in &model.lm_blocks {
        let (out, _, _) =
            block_forward(block, &x, dims.heads, Some(seq.positions()), true, false, &mut macs);
        x = out;
    }
    let mut normed = vec![0.0f32; dims.dim];
    model.lm_final_ln.apply_row(x.row(x.rows() - 1), &mut normed);
    let h_last = Matrix::from_vec(1, dims.dim, normed);
    Ok(mm(&h_last, &model.lm_head, &mut macs.proj).row(0).to_vec())
}

/// Convenience for tests and traces: fresh per-frame patch embeddings drawn
/// from the run seed.
pub fn synth_frame(model: &Model, seed: u64, frame: usize) -> Result<TokenSeq> {
    let n = model.dims.encoder_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xF00D + frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let tokens = Matrix::randn(n, model.dims.encoder.dim, 1.0, &mut rng);
    TokenSeq::from_embeddings(tokens, SpanTag::Image)
}

/// Fresh system/instruction embeddings for a workload.
pub fn synth_prompt_span(model: &Model, seed: u64, which: &str, len: usize) -> Matrix {
    let tag = which.bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Matrix::randn(len, model.dims.lm.dim, 1.0, &mut rng)
}
