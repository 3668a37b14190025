//! Training-free token reduction for a two-stage vision-language pipeline.
//!
//! A toy-but-complete stack: seeded transformer forward passes (image encoder
//! → projector → causal LM), attention-derived token scoring, one-step
//! weighted merging with baseline strategies to compare against, an analytic
//! FLOPs/KV model, a paired wall-clock bench harness, and patch-grid mask
//! rendering. Everything is deterministic per `(config, seed)`; the parallel
//! feature only changes how row loops are scheduled, never the results.

pub mod attention;
pub mod baselines;
pub mod bench;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mask;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod record;
pub mod schedule;
pub mod similarity;
pub mod tokens;
pub mod trace;

pub use attention::AttentionMap;
pub use baselines::{apply_strategy, StrategyKind, StrategySpec};
pub use bench::{bench_run, BenchReport};
pub use config::{load_config, parse_config, RunConfig};
pub use cost::{flops_estimate, CostReport, Workload};
pub use error::{Error, Result};
pub use experiment::{run_ablations, run_experiment};
pub use linalg::{init_workers, Matrix};
pub use mask::{render_masks, write_mask_files, MaskImage};
pub use merge::{fast_merge, merge_step, partition, MergeWeights, Stage, WeightOrder};
pub use model::{build_model, Model, ModelDims};
pub use pipeline::{run_pipeline, PipelineRun};
pub use record::RunRecord;
pub use schedule::MergeSchedule;
pub use similarity::{similarity_encoder, similarity_lm, SimilarityScores};
pub use tokens::{SpanTag, TokenSeq};
pub use trace::PipelineTrace;
