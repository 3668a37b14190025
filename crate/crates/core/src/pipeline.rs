//! End-to-end timed execution: frames → encoder → projector → prefill →
//! decode, with per-component wall-clock and the full trace.

use std::time::Instant;

use crate::cost::Workload;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{
    encoder_forward, lm_decode, lm_prefill, project, synth_frame, synth_prompt_span,
    ImageProvenance, Model,
};
use crate::schedule::MergeSchedule;
use crate::tokens::SpanTag;
use crate::trace::{ComponentTimes, PipelineTrace};

/// Everything a single pipeline execution produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub trace: PipelineTrace,
    pub decoded: Vec<u32>,
    pub final_prompt_tokens: usize,
}

/// Runs the whole pipeline once on seeded synthetic inputs. The same
/// `(model, schedule, workload, seed)` always produces the same tokens,
/// traces, and decoded ids; only the timing fields vary.
pub fn run_pipeline(
    model: &Model,
    schedule: &MergeSchedule,
    workload: &Workload,
    seed: u64,
) -> Result<PipelineRun> {
    workload.validate()?;
    let n0 = model.dims.encoder_tokens();
    let enc_out = schedule.encoder_output_len(n0);
    schedule.validate(
        model.dims.encoder.layers,
        model.dims.lm.layers,
        n0,
        workload.frames * enc_out,
    )?;

    let frames: Vec<_> = (0..workload.frames)
        .map(|f| synth_frame(model, seed, f))
        .collect::<Result<_>>()?;
    let system = synth_prompt_span(model, seed, "system", workload.system_len);
    let instruction = synth_prompt_span(model, seed, "instruction", workload.instruction_len);

    let t = Instant::now();
    let mut frame_seqs = Vec::with_capacity(workload.frames);
    let mut encoder_traces = Vec::with_capacity(workload.frames);
    for (f, frame) in frames.iter().enumerate() {
        let (out, trace) = encoder_forward(model, frame, schedule, f)?;
        frame_seqs.push(out);
        encoder_traces.push(trace);
    }
    let encoder_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let total_rows: usize = frame_seqs.iter().map(|s| s.len()).sum();
    let mut concat = Matrix::zeros(total_rows, model.dims.encoder.dim);
    let mut row = 0;
    for seq in &frame_seqs {
        for i in 0..seq.len() {
            concat.row_mut(row).copy_from_slice(seq.token(i));
            row += 1;
        }
    }
    let (projected, projector_macs) = project(model, &concat)?;
    let projector_ms = t.elapsed().as_secs_f64() * 1e3;

    let provenance = ImageProvenance::from_frames(&frame_seqs, n0);

    let t = Instant::now();
    let (mut state, kv, lm_trace) = lm_prefill(
        model,
        &system,
        &projected,
        &instruction,
        schedule,
        Some(&provenance),
    )?;
    let lm_prefill_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let (decoded, decode_macs) = lm_decode(model, &mut state, workload.decode_steps)?;
    let lm_decode_ms = t.elapsed().as_secs_f64() * 1e3;

    let final_image_tokens = state
        .seq
        .span_tags()
        .iter()
        .filter(|&&t| t == SpanTag::Image)
        .count();
    let trace = PipelineTrace {
        encoder_frames: encoder_traces,
        projector_macs,
        lm: lm_trace,
        decode_macs,
        kv,
        times: ComponentTimes {
            encoder_ms,
            projector_ms,
            lm_prefill_ms,
            lm_decode_ms,
        },
        patch_grid: model.dims.encoder.patch_grid,
        encoder_output_tokens: enc_out,
        final_image_tokens,
    };
    Ok(PipelineRun {
        trace,
        decoded,
        final_prompt_tokens: state.seq.len(),
    })
}
