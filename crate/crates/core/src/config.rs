//! Run configuration: a JSON file where every field is optional and missing
//! fields take the published defaults. An empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::Workload;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::schedule::MergeSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub schedule: MergeSchedule,
    pub workload: Workload,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub render: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dims: ModelDims::default(),
            schedule: MergeSchedule::default(),
            workload: Workload::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            render: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.workload.validate()?;
        let n0 = self.dims.encoder_tokens();
        let span = self.workload.frames * self.schedule.encoder_output_len(n0);
        self.schedule
            .validate(self.dims.encoder.layers, self.dims.lm.layers, n0, span)
    }
}

/// Schedule counts are unsigned in the typed config, which would turn a
/// negative value into a generic parse error; catch them first so the error
/// names the field and carries the schedule exit code.
fn check_schedule_signs(value: &serde_json::Value) -> Result<()> {
    let Some(s) = value.get("schedule") else {
        return Ok(());
    };
    for field in ["r_v", "r_t", "lm_layer"] {
        if let Some(x) = s.get(field).and_then(serde_json::Value::as_i64) {
            if x < 0 {
                return Err(Error::Schedule(format!(
                    "schedule.{field} must be non-negative, got {x}"
                )));
            }
        }
    }
    if let Some(layers) = s.get("encoder_layers").and_then(serde_json::Value::as_array) {
        for x in layers {
            if let Some(i) = x.as_i64() {
                if i < 0 {
                    return Err(Error::Schedule(format!(
                        "schedule.encoder_layers contains negative block index {i}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Parses and validates config text. Empty or whitespace-only input yields
/// the full default configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    check_schedule_signs(&value)?;
    let config: RunConfig = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("bad config field: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
