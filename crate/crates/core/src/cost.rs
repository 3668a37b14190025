//! Closed-form cost model for the pipeline.
//!
//! Per-block FLOPs at width `d` over `n` tokens: attention `4·n²·d` (QKᵀ and
//! AV, two FLOPs per multiply-accumulate) plus projections-and-MLP `16·n·d²`
//! (QKVO at 8·n·d² and the 2×-wide MLP at 8·n·d²). The instrumented
//! multiply-accumulate counters in the forward pass tally exactly these terms,
//! so `2 × macs` is directly comparable; the only executed work outside the
//! model is the decode head (`d × vocab` per step, well under the comparison
//! tolerance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::schedule::MergeSchedule;

/// Prompt/decode shape of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub frames: usize,
    pub system_len: usize,
    pub instruction_len: usize,
    pub decode_steps: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            frames: 1,
            system_len: 20,
            instruction_len: 15,
            decode_steps: 32,
        }
    }
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("workload.frames", self.frames),
            ("workload.system_len", self.system_len),
            ("workload.instruction_len", self.instruction_len),
            ("workload.decode_steps", self.decode_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Fraction of analytic FLOPs per component; sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentShares {
    pub encoder: f64,
    pub projector: f64,
    pub lm_prefill: f64,
    pub lm_decode: f64,
}

impl ComponentShares {
    pub fn sum(&self) -> f64 {
        self.encoder + self.projector + self.lm_prefill + self.lm_decode
    }
}

/// Instrumented counters gathered from an actual run, attached next to the
/// analytic figures (multiply-accumulates, not FLOPs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredCost {
    pub encoder_macs: u64,
    pub projector_macs: u64,
    pub lm_prefill_macs: u64,
    pub lm_decode_macs: u64,
    pub kv_cache_bytes: u64,
    pub peak_rss_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub encoder_flops: u64,
    pub projector_flops: u64,
    pub lm_prefill_flops: u64,
    /// Analytic FLOPs of the first decode step (cache lengths plus one).
    pub lm_decode_flops_per_step: u64,
    pub lm_decode_flops_total: u64,
    pub total_flops: u64,
    pub kv_cache_bytes: u64,
    pub component_shares: ComponentShares,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<MeasuredCost>,
}

fn block_flops(n: u64, dim: u64) -> u64 {
    4 * n * n * dim + 16 * n * dim * dim
}

/// Analytic cost of one experiment under `schedule`.
pub fn flops_estimate(
    dims: &ModelDims,
    schedule: &MergeSchedule,
    workload: &Workload,
) -> Result<CostReport> {
    dims.validate()?;
    workload.validate()?;
    let n0 = dims.encoder_tokens();
    let enc_out = schedule.encoder_output_len(n0);
    schedule.validate(
        dims.encoder.layers,
        dims.lm.layers,
        n0,
        workload.frames * enc_out,
    )?;

    let e_dim = dims.encoder.dim as u64;
    let l_dim = dims.lm.dim as u64;

    let enc_counts = schedule.encoder_block_counts(dims.encoder.layers, n0);
    let per_frame: u64 = enc_counts[..dims.encoder.layers]
        .iter()
        .map(|&n| block_flops(n as u64, e_dim))
        .sum();
    let encoder_flops = per_frame * workload.frames as u64;

    let projector_flops = 2
        * (workload.frames * enc_out) as u64
        * e_dim
        * dims.projector.out_dim as u64;

    let prompt_len = workload.system_len + workload.frames * enc_out + workload.instruction_len;
    let lm_counts = schedule.lm_block_counts(dims.lm.layers, prompt_len);
    let cache_lens = &lm_counts[..dims.lm.layers];
    let lm_prefill_flops: u64 = cache_lens
        .iter()
        .map(|&n| block_flops(n as u64, l_dim))
        .sum();

    let decode_step = |t: u64| -> u64 {
        cache_lens
            .iter()
            .map(|&len| 4 * (len as u64 + t + 1) * l_dim + 16 * l_dim * l_dim)
            .sum()
    };
    let lm_decode_flops_per_step = decode_step(0);
    let lm_decode_flops_total = (0..workload.decode_steps as u64).map(decode_step).sum();

    let kv_cache_bytes: u64 = cache_lens.iter().map(|&len| 2 * len as u64 * l_dim * 4).sum();

    let total_flops =
        encoder_flops + projector_flops + lm_prefill_flops + lm_decode_flops_total;
    let total = total_flops as f64;
    let component_shares = ComponentShares {
        encoder: encoder_flops as f64 / total,
        projector: projector_flops as f64 / total,
        lm_prefill: lm_prefill_flops as f64 / total,
        lm_decode: lm_decode_flops_total as f64 / total,
    };

    Ok(CostReport {
        encoder_flops,
        projector_flops,
        lm_prefill_flops,
        lm_decode_flops_per_step,
        lm_decode_flops_total,
        total_flops,
        kv_cache_bytes,
        component_shares,
        measured: None,
    })
}
