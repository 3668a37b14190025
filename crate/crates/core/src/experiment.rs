//! Experiment orchestration: one configured run producing a result record
//! (plus masks), and the published ablation sweeps.

use std::path::PathBuf;

use crate::bench::peak_rss_bytes;
use crate::baselines::{StrategyKind, StrategySpec};
use crate::config::RunConfig;
use crate::cost::{flops_estimate, MeasuredCost};
use crate::error::{Error, Result};
use crate::mask::{render_masks, write_mask_files, MaskImage};
use crate::model::build_model;
use crate::pipeline::run_pipeline;
use crate::record::{summarize_trace, write_record, RunRecord, SCHEMA_VERSION};
use crate::schedule::MergeSchedule;

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub record: RunRecord,
    pub record_path: PathBuf,
    pub mask_paths: Vec<PathBuf>,
}

/// Builds the full record for one config: pipeline run, paired no-op run for
/// the wall-clock ratio, analytic cost with measured counters attached, and
/// masks when rendering. Performs no file I/O.
fn build_record(config: &RunConfig, baseline_ms: Option<f64>) -> Result<RunRecord> {
    config.validate()?;
    let model = build_model(&config.dims, config.seed)?;
    // When the baseline is timed here rather than supplied, discard one
    // warmup run first so both timed runs see a warm cache and allocator.
    let base_ms = match baseline_ms {
        Some(ms) => ms,
        None => {
            run_pipeline(&model, &config.schedule, &config.workload, config.seed)?;
            let base =
                run_pipeline(&model, &MergeSchedule::noop(), &config.workload, config.seed)?;
            base.trace.times.end_to_end_ms()
        }
    };
    let run = run_pipeline(&model, &config.schedule, &config.workload, config.seed)?;
    let own_ms = run.trace.times.end_to_end_ms();

    let mut cost = flops_estimate(&config.dims, &config.schedule, &config.workload)?;
    let encoder_macs = run
        .trace
        .encoder_frames
        .iter()
        .fold(0, |acc, f| acc + f.macs.total());
    cost.measured = Some(MeasuredCost {
        encoder_macs,
        projector_macs: run.trace.projector_macs.total(),
        lm_prefill_macs: run.trace.lm.macs.total(),
        lm_decode_macs: run.trace.decode_macs.total(),
        kv_cache_bytes: run.trace.kv.bytes,
        peak_rss_bytes: peak_rss_bytes(),
    });

    let masks: Option<Vec<MaskImage>> =
        if config.render { Some(render_masks(&run.trace)?) } else { None };
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        trace: summarize_trace(&run),
        decoded_ids: run.decoded,
        cost,
        speedup: base_ms / own_ms,
        tokens_per_second: config.workload.decode_steps as f64 / (own_ms / 1e3),
        masks,
    })
}

/// Runs one experiment and writes `record.json` (and mask files when
/// rendering) under the config's output directory.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput> {
    let record = build_record(config, None)?;
    let record_path = write_record(&record, &config.output_dir, "record")?;
    let mask_paths = match &record.masks {
        Some(masks) => write_mask_files(masks, &config.output_dir.join("masks"))?,
        None => Vec::new(),
    };
    Ok(ExperimentOutput { record, record_path, mask_paths })
}

/// The published sweeps, each as `(name, config)` derived from `base`:
/// encoder token budgets, reduction layer placements at a constant total
/// budget, LM reduction depths, and the strategy comparison. Defined for the
/// 27×27 default grid whose arithmetic the budgets are written in.
pub fn ablation_suite(base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    if base.dims.encoder_tokens() != 729 {
        return Err(Error::Config(format!(
            "ablation sweeps are defined for the 27x27 grid (729 patches), got {}",
            base.dims.encoder_tokens()
        )));
    }
    let mut suite = Vec::new();
    let mut push = |name: String, schedule: MergeSchedule| {
        let mut config = base.clone();
        config.schedule = schedule;
        config.render = false;
        suite.push((name, config));
    };

    // Encoder budget sweep: tokens kept after the encoder stage. 576 keeps
    // the per-layer reduction integral by using three layers instead of four.
    let budgets: [(usize, Vec<usize>, usize); 6] = [
        (576, vec![3, 4, 5], 51),
        (425, vec![3, 4, 5, 6], 76),
        (361, vec![3, 4, 5, 6], 92),
        (289, vec![3, 4, 5, 6], 110),
        (225, vec![3, 4, 5, 6], 126),
        (169, vec![3, 4, 5, 6], 140),
    ];
    for (kept, layers, r_v) in budgets {
        push(
            format!("kept_{kept}"),
            MergeSchedule { encoder_layers: layers, r_v, ..base.schedule.clone() },
        );
    }

    // Layer placement sweep at a constant encoder budget of 368 tokens.
    let placements: [(&str, Vec<usize>, usize); 7] = [
        ("layers_1", vec![1], 368),
        ("layers_5", vec![5], 368),
        ("layers_2_3", vec![2, 3], 184),
        ("layers_7_8", vec![7, 8], 184),
        ("layers_2_3_4_5", vec![2, 3, 4, 5], 92),
        ("layers_5_6_7_8", vec![5, 6, 7, 8], 92),
        ("layers_7_8_9_10", vec![7, 8, 9, 10], 92),
    ];
    for (name, layers, r_v) in placements {
        push(
            name.to_string(),
            MergeSchedule { encoder_layers: layers, r_v, ..base.schedule.clone() },
        );
    }

    // LM reduction depth sweep.
    for lm_layer in [2, 5, 8] {
        push(
            format!("lm_layer_{lm_layer}"),
            MergeSchedule { lm_layer, ..base.schedule.clone() },
        );
    }

    // Strategy comparison on the default schedule.
    for kind in StrategyKind::ALL {
        push(
            format!("strategy_{kind}"),
            MergeSchedule {
                strategy: StrategySpec { kind, ..base.schedule.strategy },
                ..base.schedule.clone()
            },
        );
    }

    for (name, config) in &suite {
        config
            .validate()
            .map_err(|e| Error::Schedule(format!("ablation '{name}' is invalid: {e}")))?;
    }
    Ok(suite)
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub name: String,
    pub record: RunRecord,
    pub path: PathBuf,
}

/// Runs every sweep setting and writes `<name>.json` under
/// `<output_dir>/ablations`. Workers own their model instances; the no-op
/// baseline is timed once up front (it is identical across settings), and
/// writing goes through this single collector thread in suite order.
pub fn run_ablations(base: &RunConfig) -> Result<Vec<AblationOutcome>> {
    base.validate()?;
    let suite = ablation_suite(base)?;
    let model = build_model(&base.dims, base.seed)?;
    let baseline =
        run_pipeline(&model, &MergeSchedule::noop(), &base.workload, base.seed)?;
    let baseline_ms = baseline.trace.times.end_to_end_ms();
    drop(model);

    #[cfg(feature = "parallel")]
    let records: Vec<RunRecord> = {
        use rayon::prelude::*;
        suite
            .par_iter()
            .map(|(_, config)| build_record(config, Some(baseline_ms)))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<RunRecord> = suite
        .iter()
        .map(|(_, config)| build_record(config, Some(baseline_ms)))
        .collect::<Result<_>>()?;

    let dir = base.output_dir.join("ablations");
    let mut outcomes = Vec::with_capacity(records.len());
    for ((name, _), record) in suite.into_iter().zip(records) {
        let path = write_record(&record, &dir, &name)?;
        outcomes.push(AblationOutcome { name, record, path });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderDims, LmDims, ModelDims, ProjectorDims};
    use crate::cost::Workload;

    fn tiny_config(tag: &str) -> RunConfig {
        RunConfig {
            dims: ModelDims {
                encoder: EncoderDims { layers: 3, dim: 16, heads: 2, patch_grid: (3, 3) },
                projector: ProjectorDims { out_dim: 16 },
                lm: LmDims { layers: 2, dim: 16, heads: 2, vocab: 31 },
            },
            schedule: MergeSchedule {
                encoder_layers: vec![2],
                r_v: 2,
                lm_layer: 1,
                r_t: 2,
                strategy: StrategySpec::default(),
            },
            workload: Workload { frames: 1, system_len: 3, instruction_len: 2, decode_steps: 4 },
            seed: 17,
            output_dir: std::env::temp_dir().join(format!("exp-{tag}-{}", std::process::id())),
            render: true,
        }
    }

    #[test]
    fn run_experiment_writes_record_and_masks() {
        let config = tiny_config("basic");
        let out = run_experiment(&config).unwrap();
        assert!(out.record_path.exists());
        // 1 encoder event + 1 LM event + 1 final, twice (ppm + svg).
        assert_eq!(out.mask_paths.len(), 6);
        assert_eq!(out.record.trace.encoder_output_tokens, 7);
        assert_eq!(out.record.trace.final_image_tokens, 5);
        assert_eq!(out.record.decoded_ids.len(), 4);
        let text = std::fs::read_to_string(&out.record_path).unwrap();
        let back = RunRecord::from_json_str(&text).unwrap();
        assert_eq!(back, out.record);
        std::fs::remove_dir_all(&config.output_dir).ok();
    }

    #[test]
    fn repeat_runs_agree_on_golden_bytes_and_mask_files() {
        let config = tiny_config("golden");
        let a = run_experiment(&config).unwrap();
        let first: Vec<Vec<u8>> =
            a.mask_paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.record.golden_bytes(), b.record.golden_bytes());
        for (path, bytes) in b.mask_paths.iter().zip(first) {
            assert_eq!(std::fs::read(path).unwrap(), bytes, "{}", path.display());
        }
        std::fs::remove_dir_all(&config.output_dir).ok();
    }

    #[test]
    fn suite_covers_published_sweeps_with_valid_configs() {
        let suite = ablation_suite(&RunConfig::default()).unwrap();
        assert_eq!(suite.len(), 6 + 7 + 3 + StrategyKind::ALL.len());
        let kept: Vec<_> = suite
            .iter()
            .filter(|(name, _)| name.starts_with("kept_"))
            .map(|(_, c)| {
                c.schedule.encoder_output_len(729)
            })
            .collect();
        assert_eq!(kept, vec![576, 425, 361, 289, 225, 169]);
        for (name, config) in &suite {
            if name.starts_with("layers_") {
                let spent: usize = config.schedule.encoder_layers.len() * config.schedule.r_v;
                assert_eq!(spent, 368, "{name}");
            }
        }
    }

    #[test]
    fn non_default_grids_cannot_run_the_published_sweeps() {
        let config = tiny_config("grid");
        let err = ablation_suite(&config).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
