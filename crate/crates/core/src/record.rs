//! Structured result records with a stable schema. Timing-derived fields are
//! excluded from the golden byte form so records from identical (config,
//! seed) pairs compare byte-for-byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::mask::MaskImage;
use crate::merge::Stage;
use crate::pipeline::PipelineRun;
use crate::trace::{ComponentTimes, PipelineTrace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub stage: Stage,
    pub frame: Option<usize>,
    pub block: usize,
    pub r: usize,
    pub pre_len: usize,
    pub post_len: usize,
    pub kept_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub encoder: u64,
    pub projector: u64,
    pub lm_prefill: u64,
    pub lm_decode: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub patch_grid: (usize, usize),
    pub encoder_block_counts: Vec<Vec<usize>>,
    pub lm_block_counts: Vec<usize>,
    pub events: Vec<EventSummary>,
    pub encoder_output_tokens: usize,
    pub final_image_tokens: usize,
    pub final_prompt_tokens: usize,
    pub kv_per_block_tokens: Vec<usize>,
    pub kv_cache_bytes: u64,
    pub macs: MacBreakdown,
    pub times_ms: ComponentTimes,
    pub end_to_end_ms: f64,
}

pub fn summarize_trace(run: &PipelineRun) -> TraceSummary {
    let trace: &PipelineTrace = &run.trace;
    let events = trace
        .all_events()
        .map(|e| EventSummary {
            stage: e.stage,
            frame: e.frame,
            block: e.block,
            r: e.r,
            pre_len: e.pre_len,
            post_len: e.post_len,
            kept_cells: e.kept_cells(),
        })
        .collect();
    let encoder_macs = trace
        .encoder_frames
        .iter()
        .fold(0, |acc, f| acc + f.macs.total());
    TraceSummary {
        patch_grid: trace.patch_grid,
        encoder_block_counts: trace
            .encoder_frames
            .iter()
            .map(|f| f.block_counts.clone())
            .collect(),
        lm_block_counts: trace.lm.block_counts.clone(),
        events,
        encoder_output_tokens: trace.encoder_output_tokens,
        final_image_tokens: trace.final_image_tokens,
        final_prompt_tokens: run.final_prompt_tokens,
        kv_per_block_tokens: trace.kv.per_block_tokens.clone(),
        kv_cache_bytes: trace.kv.bytes,
        macs: MacBreakdown {
            encoder: encoder_macs,
            projector: trace.projector_macs.total(),
            lm_prefill: trace.lm.macs.total(),
            lm_decode: trace.decode_macs.total(),
        },
        times_ms: trace.times,
        end_to_end_ms: trace.times.end_to_end_ms(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub trace: TraceSummary,
    pub decoded_ids: Vec<u32>,
    pub cost: CostReport,
    /// Paired no-op wall-clock over this schedule's wall-clock; volatile.
    pub speedup: f64,
    pub tokens_per_second: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<MaskImage>>,
}

impl RunRecord {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("record serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("record does not match schema: {e}")))
    }

    /// Serialized form with wall-clock-derived fields removed; byte-identical
    /// across runs of the same config and seed.
    pub fn golden_bytes(&self) -> Vec<u8> {
        let mut value = serde_json::to_value(self).expect("record serializes");
        let root = value.as_object_mut().expect("record is an object");
        root.remove("speedup");
        root.remove("tokens_per_second");
        if let Some(trace) = root.get_mut("trace").and_then(|t| t.as_object_mut()) {
            trace.remove("times_ms");
            trace.remove("end_to_end_ms");
        }
        if let Some(measured) = root
            .get_mut("cost")
            .and_then(|c| c.get_mut("measured"))
            .and_then(|m| m.as_object_mut())
        {
            measured.remove("peak_rss_bytes");
        }
        let mut bytes = serde_json::to_vec_pretty(&value).expect("value serializes");
        bytes.push(b'\n');
        bytes
    }
}

pub fn write_record(record: &RunRecord, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, record.to_json_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{flops_estimate, Workload};
    use crate::model::ModelDims;
    use crate::schedule::MergeSchedule;

    fn sample_record(speedup: f64, encoder_ms: f64) -> RunRecord {
        let config = RunConfig::default();
        let cost = flops_estimate(&config.dims, &config.schedule, &config.workload).unwrap();
        RunRecord {
            schema_version: SCHEMA_VERSION,
            config,
            trace: TraceSummary {
                patch_grid: (27, 27),
                encoder_block_counts: vec![vec![729; 13]],
                lm_block_counts: vec![764; 9],
                events: vec![],
                encoder_output_tokens: 361,
                final_image_tokens: 253,
                final_prompt_tokens: 288,
                kv_per_block_tokens: vec![764; 8],
                kv_cache_bytes: 1,
                macs: MacBreakdown { encoder: 1, projector: 2, lm_prefill: 3, lm_decode: 4 },
                times_ms: ComponentTimes {
                    encoder_ms,
                    projector_ms: 0.1,
                    lm_prefill_ms: 0.2,
                    lm_decode_ms: 0.3,
                },
                end_to_end_ms: encoder_ms + 0.6,
            },
            decoded_ids: vec![5, 6, 7],
            cost,
            speedup,
            tokens_per_second: 10.0 * speedup,
            masks: None,
        }
    }

    #[test]
    fn records_round_trip_through_json() {
        let record = sample_record(1.5, 12.0);
        let text = String::from_utf8(record.to_json_bytes()).unwrap();
        let back = RunRecord::from_json_str(&text).unwrap();
        assert_eq!(back, record);
        assert!(text.contains("\"schema_version\": 1"));
    }

    #[test]
    fn golden_bytes_ignore_timing_but_keep_substance() {
        let a = sample_record(1.5, 12.0);
        let b = sample_record(2.1, 99.0);
        assert_ne!(a.to_json_bytes(), b.to_json_bytes());
        assert_eq!(a.golden_bytes(), b.golden_bytes());

        let golden = String::from_utf8(a.golden_bytes()).unwrap();
        assert!(!golden.contains("times_ms"));
        assert!(!golden.contains("speedup"));
        assert!(golden.contains("decoded_ids"));
        assert!(golden.contains("kv_cache_bytes"));
    }

    #[test]
    fn golden_bytes_see_substantive_differences() {
        let a = sample_record(1.5, 12.0);
        let mut b = sample_record(1.5, 12.0);
        b.decoded_ids[0] = 99;
        assert_ne!(a.golden_bytes(), b.golden_bytes());
    }

    #[test]
    fn schema_rejects_unknown_shapes() {
        assert!(RunRecord::from_json_str("{\"schema_version\": 1}").is_err());
    }

    #[test]
    fn bad_workloads_never_build_cost_reports() {
        let err = flops_estimate(
            &ModelDims::default(),
            &MergeSchedule::default(),
            &Workload { decode_steps: 0, ..Workload::default() },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
