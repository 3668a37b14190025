//! Execution traces: per-block token counts, merge events with patch-level
//! outcome snapshots, multiply-accumulate tallies, and component timings.

use serde::{Deserialize, Serialize};

use crate::merge::Stage;
use crate::tokens::TokenSeq;

/// What happened to one original patch as of a given merge event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "into", rename_all = "snake_case")]
pub enum CellState {
    /// The patch survives as its own token.
    Kept,
    /// The patch was folded into the surviving token anchored at this index.
    MergedInto(u32),
    /// The patch was discarded by a pruning strategy.
    Dropped,
}

/// Derives the cumulative patch states encoded in a sequence's lineage:
/// each token keeps its anchor (position) cell and marks the rest of its
/// lineage as merged into that anchor; uncovered indices were dropped.
pub fn cells_from_seq(seq: &TokenSeq) -> Vec<CellState> {
    let mut cells = vec![CellState::Dropped; seq.origin_len()];
    for (i, set) in seq.lineage().iter().enumerate() {
        let anchor = seq.positions()[i];
        for &src in set {
            cells[src] = if src == anchor {
                CellState::Kept
            } else {
                CellState::MergedInto(anchor as u32)
            };
        }
    }
    cells
}

/// One reduction event and the cumulative patch-state snapshot after it.
/// Encoder events index cells by frame-local patch; the LM event indexes by
/// global patch (frame * patches-per-frame + local).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub stage: Stage,
    /// Frame index for encoder events; `None` for the LM event.
    pub frame: Option<usize>,
    /// 1-based block whose output was reduced.
    pub block: usize,
    pub r: usize,
    pub pre_len: usize,
    pub post_len: usize,
    pub cells: Vec<CellState>,
}

impl MergeEvent {
    pub fn kept_cells(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, CellState::Kept)).count()
    }
}

/// Multiply-accumulate counts, split by the two cost-model terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts {
    /// Score and value products (the N²·dim term).
    pub attn: u64,
    /// QKVO, MLP, projector, and head products (the N·dim² term).
    pub proj: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.attn + self.proj
    }

    /// FLOPs at two per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.total()
    }

    pub fn add(&mut self, other: MacCounts) {
        self.attn += other.attn;
        self.proj += other.proj;
    }
}

/// Trace of one stage pass: token count entering each block (final count
/// appended), the merge events, and the executed multiply-accumulates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub block_counts: Vec<usize>,
    pub events: Vec<MergeEvent>,
    pub macs: MacCounts,
}

/// Cached-token footprint of the LM after prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCacheStats {
    /// Cached tokens per block, in block order.
    pub per_block_tokens: Vec<usize>,
    /// Total key+value bytes at 4 bytes per element.
    pub bytes: u64,
}

/// Median wall-clock milliseconds per pipeline component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTimes {
    pub encoder_ms: f64,
    pub projector_ms: f64,
    pub lm_prefill_ms: f64,
    pub lm_decode_ms: f64,
}

impl ComponentTimes {
    pub fn end_to_end_ms(&self) -> f64 {
        self.encoder_ms + self.projector_ms + self.lm_prefill_ms + self.lm_decode_ms
    }
}

/// The full per-run trace assembled by the experiment driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    /// One encoder trace per frame.
    pub encoder_frames: Vec<StageTrace>,
    pub projector_macs: MacCounts,
    pub lm: StageTrace,
    pub decode_macs: MacCounts,
    pub kv: KvCacheStats,
    pub times: ComponentTimes,
    /// Patch grid of each frame (rows, cols).
    pub patch_grid: (usize, usize),
    /// Encoder output tokens across all frames (= LM image span length).
    pub encoder_output_tokens: usize,
    /// Image tokens surviving after the LM reduction.
    pub final_image_tokens: usize,
}

impl PipelineTrace {
    pub fn frames(&self) -> usize {
        self.encoder_frames.len()
    }

    /// All merge events in pipeline order: encoder frames, then the LM.
    pub fn all_events(&self) -> impl Iterator<Item = &MergeEvent> {
        self.encoder_frames
            .iter()
            .flat_map(|f| f.events.iter())
            .chain(self.lm.events.iter())
    }

    /// Executed multiply-accumulates summed over every component.
    pub fn total_macs(&self) -> MacCounts {
        let mut total = MacCounts::default();
        for f in &self.encoder_frames {
            total.add(f.macs);
        }
        total.add(self.projector_macs);
        total.add(self.lm.macs);
        total.add(self.decode_macs);
        total
    }
}
