//! Command-line front end: run one configured experiment, benchmark a
//! schedule against the no-op baseline, sweep the published ablations, or
//! re-render kept-token masks from a stored result record.
//!
//! Results go to the output directory as records and mask files; a compact
//! JSON summary goes to stdout. Failures print a machine-readable error
//! record to stderr and exit with the error's code (2 config, 3 schedule,
//! 4 benchmark, 1 anything else).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokmerge_core::experiment::run_ablations;
use tokmerge_core::record::RunRecord;
use tokmerge_core::{
    bench_run, build_model, init_workers, load_config, run_experiment, write_mask_files, Error,
    Result, RunConfig,
};

/// Worker-count override for the parallel kernels and the ablation sweep.
const WORKERS_ENV: &str = "TOKMERGE_WORKERS";

#[derive(Parser)]
#[command(name = "tokmerge", version, about = "Token-merging pipeline driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the experiment-shaped subcommands. Each one overrides the
/// corresponding config field; the config file itself is optional.
#[derive(Args)]
struct Overrides {
    /// JSON config file; defaults apply for everything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the reduction strategy: illava, greedy, bipartite, kmeans,
    /// prune_topk, prune_random or none.
    #[arg(long)]
    strategy: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Render kept-token masks next to the record.
    #[arg(long)]
    render: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its result record.
    Run(Overrides),
    /// Time the configured schedule against the no-op baseline.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
        /// Measured repeats, after one discarded warmup pair.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run every published sweep setting, one record per setting.
    Ablate(Overrides),
    /// Re-render mask files from a record produced with --render.
    Visualize {
        /// Path to the stored result record.
        record: PathBuf,
        /// Directory for the mask files; defaults to masks/ next to the record.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": { "kind": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() }
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let workers: usize = raw.trim().parse().map_err(|_| {
            Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'"))
        })?;
        if workers == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be at least 1")));
        }
        init_workers(Some(workers));
    }

    match cli.command {
        Command::Run(overrides) => run(&build_config(&overrides)?),
        Command::Bench { overrides, repeats } => bench(&build_config(&overrides)?, repeats),
        Command::Ablate(overrides) => ablate(&build_config(&overrides)?),
        Command::Visualize { record, out } => visualize(&record, out.as_deref()),
    }
}

/// Loads the config (or defaults) and applies the flag overrides.
fn build_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match &overrides.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(strategy) = &overrides.strategy {
        config.schedule.strategy.kind = strategy.parse()?;
    }
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if overrides.render {
        config.render = true;
    }
    config.validate()?;
    Ok(config)
}

fn run(config: &RunConfig) -> Result<()> {
    let output = run_experiment(config)?;
    let summary = serde_json::json!({
        "record": output.record_path,
        "mask_files": output.mask_paths.len(),
        "encoder_output_tokens": output.record.trace.encoder_output_tokens,
        "final_image_tokens": output.record.trace.final_image_tokens,
        "decoded_tokens": output.record.decoded_ids.len(),
        "total_flops": output.record.cost.total_flops,
        "speedup": output.record.speedup,
        "tokens_per_second": output.record.tokens_per_second,
    });
    println!("{summary:#}");
    Ok(())
}

fn bench(config: &RunConfig, repeats: usize) -> Result<()> {
    let model = build_model(&config.dims, config.seed)?;
    let report = bench_run(&model, &config.schedule, &config.workload, config.seed, repeats)?;
    println!("{:#}", serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn ablate(config: &RunConfig) -> Result<()> {
    let outcomes = run_ablations(config)?;
    let rows: Vec<_> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "name": o.name,
                "record": o.path,
                "encoder_output_tokens": o.record.trace.encoder_output_tokens,
                "total_flops": o.record.cost.total_flops,
                "speedup": o.record.speedup,
            })
        })
        .collect();
    println!("{:#}", serde_json::Value::Array(rows));
    Ok(())
}

fn visualize(record_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(record_path).map_err(|e| {
        Error::Config(format!("cannot read record {}: {e}", record_path.display()))
    })?;
    let record = RunRecord::from_json_str(&text)?;
    let masks = record.masks.as_ref().ok_or_else(|| {
        Error::Render(format!(
            "record {} carries no masks; produce one with --render",
            record_path.display()
        ))
    })?;
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => record_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("masks"),
    };
    let paths = write_mask_files(masks, &dir)?;
    let summary = serde_json::json!({
        "masks": paths.len(),
        "directory": dir,
    });
    println!("{summary:#}");
    Ok(())
}
