//! Paired wall-clock measurement of a schedule against the no-op baseline.
//!
//! Protocol: one discarded warmup pair, then `repeats` measured pairs on
//! identical seeded inputs, medians per component. Runs are pinned to a
//! single worker so the comparison is not scheduler noise.

use serde::{Deserialize, Serialize};

use crate::cost::Workload;
use crate::error::{Error, Result};
use crate::linalg::init_workers;
use crate::model::Model;
use crate::pipeline::run_pipeline;
use crate::schedule::MergeSchedule;
use crate::trace::ComponentTimes;

/// Median end-to-end must clear this; below it the samples are mostly timer
/// resolution and the ratio is meaningless.
const MIN_MEDIAN_MS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    /// Field-wise medians over the measured repeats.
    pub schedule_times: ComponentTimes,
    pub baseline_times: ComponentTimes,
    pub schedule_end_to_end_ms: f64,
    pub baseline_end_to_end_ms: f64,
    /// Baseline median end-to-end over schedule median end-to-end.
    pub speedup: f64,
    pub tokens_per_second: f64,
    pub baseline_tokens_per_second: f64,
    pub peak_rss_bytes: Option<u64>,
    pub decoded: Vec<u32>,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn median_times(samples: &[ComponentTimes]) -> ComponentTimes {
    let pick = |f: fn(&ComponentTimes) -> f64| {
        let mut v: Vec<f64> = samples.iter().map(f).collect();
        median(&mut v)
    };
    ComponentTimes {
        encoder_ms: pick(|t| t.encoder_ms),
        projector_ms: pick(|t| t.projector_ms),
        lm_prefill_ms: pick(|t| t.lm_prefill_ms),
        lm_decode_ms: pick(|t| t.lm_decode_ms),
    }
}

/// Peak resident set of this process, from the kernel's high-water mark.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Benchmarks `schedule` against the no-op baseline on identical inputs.
pub fn bench_run(
    model: &Model,
    schedule: &MergeSchedule,
    workload: &Workload,
    seed: u64,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Benchmark(format!(
            "need at least 3 measured repeats, got {repeats}"
        )));
    }
    // Best effort: if a wider pool already exists this is a no-op, but the
    // CLI initializes the pool before anything else runs.
    init_workers(Some(1));
    let baseline = MergeSchedule::noop();

    let mut schedule_samples = Vec::with_capacity(repeats);
    let mut baseline_samples = Vec::with_capacity(repeats);
    let mut decoded = Vec::new();
    for rep in 0..=repeats {
        // Alternate the order within each pair so cache/allocator warmth
        // cannot systematically favor one side.
        let (run, base) = if rep % 2 == 0 {
            let run = run_pipeline(model, schedule, workload, seed)?;
            let base = run_pipeline(model, &baseline, workload, seed)?;
            (run, base)
        } else {
            let base = run_pipeline(model, &baseline, workload, seed)?;
            let run = run_pipeline(model, schedule, workload, seed)?;
            (run, base)
        };
        if rep == 0 {
            decoded = run.decoded;
            continue;
        }
        schedule_samples.push(run.trace.times);
        baseline_samples.push(base.trace.times);
    }

    let mut sched_e2e: Vec<f64> = schedule_samples.iter().map(|t| t.end_to_end_ms()).collect();
    let mut base_e2e: Vec<f64> = baseline_samples.iter().map(|t| t.end_to_end_ms()).collect();
    let schedule_end_to_end_ms = median(&mut sched_e2e);
    let baseline_end_to_end_ms = median(&mut base_e2e);
    if schedule_end_to_end_ms < MIN_MEDIAN_MS || baseline_end_to_end_ms < MIN_MEDIAN_MS {
        return Err(Error::Benchmark(format!(
            "median end-to-end {:.4} ms (baseline {:.4} ms) is below the {MIN_MEDIAN_MS} ms timer floor; use a larger workload",
            schedule_end_to_end_ms, baseline_end_to_end_ms
        )));
    }

    let steps = workload.decode_steps as f64;
    Ok(BenchReport {
        repeats,
        schedule_times: median_times(&schedule_samples),
        baseline_times: median_times(&baseline_samples),
        schedule_end_to_end_ms,
        baseline_end_to_end_ms,
        speedup: baseline_end_to_end_ms / schedule_end_to_end_ms,
        tokens_per_second: steps / (schedule_end_to_end_ms / 1e3),
        baseline_tokens_per_second: steps / (baseline_end_to_end_ms / 1e3),
        peak_rss_bytes: peak_rss_bytes(),
        decoded,
    })
}
