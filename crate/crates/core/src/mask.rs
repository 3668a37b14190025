//! Patch-grid masks: which original patches survive at each reduction event,
//! rendered as PPM rasters and SVG drawings with deterministic bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{CellState, MergeEvent, PipelineTrace};

const LEGEND: &str = "red #dc322f = kept, black = dropped, mid-tone = merged into anchor";
/// Pixels per cell in the raster output.
const PPM_SCALE: usize = 8;
/// Pixels per cell in the vector output.
const SVG_CELL: usize = 16;

/// One patch grid with a state per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellState>,
    pub label: String,
    pub legend: String,
}

impl MaskImage {
    pub fn new(rows: usize, cols: usize, cells: Vec<CellState>, label: String) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Render(format!(
                "mask '{label}' has {} cells for a {rows}x{cols} grid",
                cells.len()
            )));
        }
        Ok(MaskImage { rows, cols, cells, label, legend: LEGEND.to_string() })
    }

    pub fn kept_cells(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, CellState::Kept)).count()
    }
}

fn cell_rgb(cell: &CellState) -> [u8; 3] {
    match cell {
        CellState::Kept => [220, 50, 47],
        CellState::Dropped => [0, 0, 0],
        CellState::MergedInto(anchor) => {
            // Splittable integer hash of the anchor index; channels sit in
            // 64..=191 so merged tones never collide with kept or dropped.
            let mut h = (*anchor as u64).wrapping_add(0x9E37_79B9);
            h ^= h >> 16;
            h = h.wrapping_mul(0x85EB_CA6B);
            h ^= h >> 13;
            h = h.wrapping_mul(0xC2B2_AE35);
            h ^= h >> 16;
            [
                64 + (h & 0x7F) as u8,
                64 + ((h >> 7) & 0x7F) as u8,
                64 + ((h >> 14) & 0x7F) as u8,
            ]
        }
    }
}

fn frame_slice(event: &MergeEvent, frame: usize, per_frame: usize) -> &[CellState] {
    &event.cells[frame * per_frame..(frame + 1) * per_frame]
}

/// Builds one mask per reduction event (LM events yield one grid per frame)
/// plus a final cumulative mask per frame. A trace without events still gets
/// its all-kept final masks.
pub fn render_masks(trace: &PipelineTrace) -> Result<Vec<MaskImage>> {
    let (rows, cols) = trace.patch_grid;
    let per_frame = rows * cols;
    let frames = trace.frames();
    let mut masks = Vec::new();

    for (f, stage) in trace.encoder_frames.iter().enumerate() {
        for event in &stage.events {
            masks.push(MaskImage::new(
                rows,
                cols,
                event.cells.clone(),
                format!("encoder_block{:02}_frame{f}", event.block),
            )?);
        }
    }
    for event in &trace.lm.events {
        if event.cells.len() != per_frame * frames {
            return Err(Error::Render(format!(
                "lm event at block {} covers {} cells, expected {}",
                event.block,
                event.cells.len(),
                per_frame * frames
            )));
        }
        for f in 0..frames {
            masks.push(MaskImage::new(
                rows,
                cols,
                frame_slice(event, f, per_frame).to_vec(),
                format!("lm_block{:02}_frame{f}", event.block),
            )?);
        }
    }

    for f in 0..frames {
        let cells = if let Some(event) = trace.lm.events.last() {
            frame_slice(event, f, per_frame).to_vec()
        } else if let Some(event) = trace.encoder_frames[f].events.last() {
            event.cells.clone()
        } else {
            vec![CellState::Kept; per_frame]
        };
        masks.push(MaskImage::new(rows, cols, cells, format!("final_frame{f}"))?);
    }
    Ok(masks)
}

/// P6 binary pixmap, `PPM_SCALE` pixels per cell, bit-exact across platforms.
pub fn ppm_bytes(mask: &MaskImage) -> Vec<u8> {
    let width = mask.cols * PPM_SCALE;
    let height = mask.rows * PPM_SCALE;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height * 3);
    for row in 0..height {
        for col in 0..width {
            let cell = &mask.cells[(row / PPM_SCALE) * mask.cols + col / PPM_SCALE];
            out.extend_from_slice(&cell_rgb(cell));
        }
    }
    out
}

/// Rect-per-cell vector drawing of the same grid.
pub fn svg_bytes(mask: &MaskImage) -> Vec<u8> {
    let width = mask.cols * SVG_CELL;
    let height = mask.rows * SVG_CELL;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!("<!-- {}: {} -->\n", mask.label, mask.legend));
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            let [red, green, blue] = cell_rgb(&mask.cells[r * mask.cols + c]);
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{SVG_CELL}\" height=\"{SVG_CELL}\" \
                 fill=\"#{red:02x}{green:02x}{blue:02x}\"/>\n",
                c * SVG_CELL,
                r * SVG_CELL,
            ));
        }
    }
    out.push_str("</svg>\n");
    out.into_bytes()
}

/// Writes `<label>.ppm` and `<label>.svg` for every mask; returns the paths.
pub fn write_mask_files(masks: &[MaskImage], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(masks.len() * 2);
    for mask in masks {
        let ppm = dir.join(format!("{}.ppm", mask.label));
        fs::write(&ppm, ppm_bytes(mask))?;
        paths.push(ppm);
        let svg = dir.join(format!("{}.svg", mask.label));
        fs::write(&svg, svg_bytes(mask))?;
        paths.push(svg);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::Workload;
    use crate::model::{build_model, EncoderDims, LmDims, ModelDims, ProjectorDims};
    use crate::pipeline::run_pipeline;
    use crate::schedule::MergeSchedule;

    fn tiny_run(schedule: &MergeSchedule) -> crate::pipeline::PipelineRun {
        let dims = ModelDims {
            encoder: EncoderDims { layers: 3, dim: 16, heads: 2, patch_grid: (3, 4) },
            projector: ProjectorDims { out_dim: 16 },
            lm: LmDims { layers: 2, dim: 16, heads: 2, vocab: 23 },
        };
        let model = build_model(&dims, 4).unwrap();
        let workload = Workload { frames: 2, system_len: 3, instruction_len: 2, decode_steps: 2 };
        run_pipeline(&model, schedule, &workload, 11).unwrap()
    }

    fn merging_schedule() -> MergeSchedule {
        MergeSchedule {
            encoder_layers: vec![2],
            r_v: 3,
            lm_layer: 1,
            r_t: 4,
            strategy: Default::default(),
        }
    }

    #[test]
    fn event_masks_track_surviving_token_counts() {
        let run = tiny_run(&merging_schedule());
        let masks = render_masks(&run.trace).unwrap();
        // 2 encoder events + 1 LM event over 2 frames + 2 finals.
        assert_eq!(masks.len(), 2 + 2 + 2);
        for mask in &masks {
            assert_eq!((mask.rows, mask.cols), (3, 4));
        }
        // Encoder events keep 12 - 3 = 9 cells, one grid per frame.
        for f in 0..2 {
            let m = masks.iter().find(|m| m.label == format!("encoder_block02_frame{f}")).unwrap();
            assert_eq!(m.kept_cells(), 9);
        }
        // LM event keeps 18 - 4 = 14 image tokens across both frames.
        let lm_kept: usize = masks
            .iter()
            .filter(|m| m.label.starts_with("lm_block01"))
            .map(|m| m.kept_cells())
            .sum();
        assert_eq!(lm_kept, 14);
        // Finals mirror the last LM state.
        let final_kept: usize = masks
            .iter()
            .filter(|m| m.label.starts_with("final"))
            .map(|m| m.kept_cells())
            .sum();
        assert_eq!(final_kept, 14);
    }

    #[test]
    fn noop_trace_renders_all_kept_finals() {
        let run = tiny_run(&MergeSchedule::noop());
        let masks = render_masks(&run.trace).unwrap();
        assert_eq!(masks.len(), 2);
        for mask in &masks {
            assert!(mask.label.starts_with("final_frame"));
            assert_eq!(mask.kept_cells(), 12);
        }
    }

    #[test]
    fn mask_files_are_bit_exact_across_runs() {
        let a = render_masks(&tiny_run(&merging_schedule()).trace).unwrap();
        let b = render_masks(&tiny_run(&merging_schedule()).trace).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(ppm_bytes(x), ppm_bytes(y));
            assert_eq!(svg_bytes(x), svg_bytes(y));
        }
    }

    #[test]
    fn ppm_header_and_payload_are_well_formed() {
        let mask = MaskImage::new(
            1,
            2,
            vec![CellState::Kept, CellState::MergedInto(0)],
            "probe".into(),
        )
        .unwrap();
        let bytes = ppm_bytes(&mask);
        let header = format!("P6\n{} {}\n255\n", 2 * PPM_SCALE, PPM_SCALE);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 2 * PPM_SCALE * PPM_SCALE * 3);
        // First pixel is the kept red; merged tone differs from both extremes.
        assert_eq!(&bytes[header.len()..header.len() + 3], &[220, 50, 47]);
        let merged = cell_rgb(&CellState::MergedInto(0));
        assert_ne!(merged, [220, 50, 47]);
        assert_ne!(merged, [0, 0, 0]);
    }

    #[test]
    fn shape_mismatch_is_a_render_error() {
        let err = MaskImage::new(2, 2, vec![CellState::Kept; 3], "bad".into()).unwrap_err();
        assert_eq!(err.kind(), "render");
    }

    #[test]
    fn written_files_round_trip_deterministically() {
        let dir = std::env::temp_dir().join(format!("mask-test-{}", std::process::id()));
        let masks = render_masks(&tiny_run(&merging_schedule()).trace).unwrap();
        let paths = write_mask_files(&masks, &dir).unwrap();
        assert_eq!(paths.len(), masks.len() * 2);
        let first = std::fs::read(&paths[0]).unwrap();
        let again = write_mask_files(&masks, &dir).unwrap();
        assert_eq!(std::fs::read(&again[0]).unwrap(), first);
        std::fs::remove_dir_all(&dir).ok();
    }
}
