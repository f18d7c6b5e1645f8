//! Experiment plumbing for the `selfres` binary: configuration, the
//! gen/run/eval/bench/dump-weights commands and the acceptance checks.

pub mod checks;
pub mod commands;
pub mod config;

use std::path::Path;

use serde_json::Value;

use selfres::sampler::ScoreMode;
use selfres::{Error, Result};

use config::{ExperimentConfig, SamplerKind, ScheduleFlag};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_BAD_CONFIG: i32 = 3;
pub const EXIT_MALFORMED: i32 = 4;

/// Stable process exit code for an engine error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
        Error::Config(_) => EXIT_BAD_CONFIG,
        Error::Format { .. } | Error::Input(_) => EXIT_MALFORMED,
        _ => EXIT_FAILURE,
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<SamplerKind>,
    pub schedule: Option<ScheduleFlag>,
    pub r: Option<usize>,
    pub ns: Option<usize>,
    pub m: Option<usize>,
    pub score: Option<ScoreMode>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Preset (or defaults), then the JSON file merged key by key, then flags.
pub fn resolve_config(preset: Option<&str>, file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match preset {
        Some(name) => ExperimentConfig::preset(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&cfg).expect("config serializes");
        merge(&mut base, patch);
        cfg = serde_json::from_value(base)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.mode {
        cfg.mode = v;
    }
    if let Some(v) = flags.schedule {
        cfg.schedule.mode = v;
    }
    if let Some(v) = flags.r {
        cfg.schedule.r = v;
    }
    if let Some(v) = flags.ns {
        cfg.schedule.ns = v;
    }
    if let Some(v) = flags.m {
        cfg.schedule.m = v;
    }
    if let Some(v) = flags.score {
        cfg.score = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
