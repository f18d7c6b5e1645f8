//! Experiment configuration: JSON file, presets and flag overrides.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use selfres::evalkit::{ClassSet, DEFAULT_CLASSES};
use selfres::model::ModelConfig;
use selfres::sampler::{make_schedule, SamplingSchedule, SamplingStep, ScheduleMode, ScoreMode};
use selfres::segmenter::Prompts;
use selfres::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Linear,
    Selfres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    /// Linear frame sampling of `ns · F` frames in one sequence.
    Linear,
    Regular,
    Smooth,
    /// Keep-everything step at the last layer.
    Identity,
}

/// One row of a comparison: a sampler together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub kind: MethodKind,
    #[serde(default)]
    pub r: usize,
    #[serde(default = "one")]
    pub ns: usize,
    #[serde(default = "three")]
    pub m: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl Method {
    pub const fn linear(ns: usize) -> Self {
        Self { kind: MethodKind::Linear, r: 0, ns, m: 3 }
    }

    pub const fn regular(r: usize, ns: usize) -> Self {
        Self { kind: MethodKind::Regular, r, ns, m: 1 }
    }

    pub const fn smooth(r: usize, ns: usize, m: usize) -> Self {
        Self { kind: MethodKind::Smooth, r, ns, m }
    }

    pub const fn identity(ns: usize) -> Self {
        Self { kind: MethodKind::Identity, r: 0, ns, m: 1 }
    }

    /// Layer actually used: indices past the stack clamp to its last layer.
    pub fn effective_r(&self, layers: usize) -> usize {
        match self.kind {
            MethodKind::Identity => layers - 1,
            _ if self.r >= layers => {
                log::warn!(
                    "sampling layer {} exceeds a {layers}-layer stack; clamped to {}",
                    self.r,
                    layers - 1
                );
                layers - 1
            }
            _ => self.r,
        }
    }

    /// `None` for linear sampling.
    pub fn schedule(&self, layers: usize) -> Result<Option<SamplingSchedule>> {
        if self.ns == 0 {
            return Err(Error::Config("ns must be at least 1".into()));
        }
        let r = self.effective_r(layers);
        Ok(match self.kind {
            MethodKind::Linear => None,
            MethodKind::Regular => Some(make_schedule(ScheduleMode::Regular, r, self.ns, 1, layers)?),
            MethodKind::Smooth => Some(make_schedule(ScheduleMode::Smooth, r, self.ns, self.m, layers)?),
            MethodKind::Identity => Some(SamplingSchedule::custom(vec![SamplingStep {
                layer: r,
                fraction: 1.0,
            }])),
        })
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            MethodKind::Linear => "Linear",
            MethodKind::Regular => "Regular",
            MethodKind::Smooth => "Smooth",
            MethodKind::Identity => "Identity",
        }
    }

    /// The `r_j/m` table cell.
    pub fn r_cell(&self, layers: usize) -> String {
        let r = match self.kind {
            MethodKind::Linear => return "-".into(),
            MethodKind::Identity => return format!("{}", layers - 1),
            _ => self.r,
        };
        let shown = if r >= layers {
            format!("{r}({})", layers - 1)
        } else {
            r.to_string()
        };
        match self.kind {
            MethodKind::Smooth => format!("{shown}/{}", self.m),
            _ => shown,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MethodKind::Linear => write!(f, "linear(frames x{})", self.ns),
            MethodKind::Regular => write!(f, "regular(r={}, ns={})", self.r, self.ns),
            MethodKind::Smooth => write!(f, "smooth(r={}, ns={}, m={})", self.r, self.ns, self.m),
            MethodKind::Identity => write!(f, "identity(ns={})", self.ns),
        }
    }
}

/// Parameters of generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub videos: usize,
    pub total_frames: usize,
    pub plant_patch_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            total_frames: 160,
            plant_patch_fraction: 0.5,
            noise_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFlag {
    Regular,
    Smooth,
}

/// The `run` method as set by `mode` and `schedule`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleFlag,
    pub r: usize,
    pub ns: usize,
    pub m: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleFlag::Smooth,
            r: 3,
            ns: 5,
            m: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prompts: Prompts,
    pub classes: Vec<String>,
    pub mode: SamplerKind,
    pub schedule: ScheduleConfig,
    pub score: ScoreMode,
    /// Dataset seed used by `gen`.
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Rows compared by `bench`.
    pub grid: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prompts: Prompts::default(),
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            mode: SamplerKind::Selfres,
            schedule: ScheduleConfig::default(),
            score: ScoreMode::Attention,
            seed: 7,
            dataset: DatasetConfig::default(),
            grid: table1_grid(),
        }
    }
}

/// Baseline, every Regular/Smooth combination of the reference grid, and the
/// two reduction rows.
pub fn table1_grid() -> Vec<Method> {
    let mut grid = vec![Method::linear(1)];
    for ns in [3, 5] {
        for r in [3, 5, 8, 12] {
            grid.push(Method::regular(r, ns));
        }
    }
    for ns in [3, 5] {
        for r in [3, 5] {
            grid.push(Method::smooth(r, ns, 3));
        }
    }
    grid.push(Method::identity(5));
    grid.push(Method::linear(5));
    grid
}

pub const PRESETS: [&str; 2] = ["table1-grid", "smoke"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1-grid" => Ok(Self::default()),
            "smoke" => Ok(Self {
                dataset: DatasetConfig {
                    videos: 11,
                    total_frames: 96,
                    ..DatasetConfig::default()
                },
                grid: vec![
                    Method::linear(1),
                    Method::regular(4, 5),
                    Method::smooth(3, 5, 3),
                    Method::identity(5),
                    Method::linear(5),
                ],
                ..Self::default()
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{location}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.class_set()?;
        if self.dataset.videos == 0 || self.dataset.total_frames == 0 {
            return Err(Error::Config("dataset needs at least one video and one frame".into()));
        }
        self.method().schedule(self.model.layers)?;
        for m in &self.grid {
            m.schedule(self.model.layers)?;
        }
        Ok(())
    }

    pub fn class_set(&self) -> Result<ClassSet> {
        ClassSet::new(&self.classes)
    }

    /// The method `run` executes.
    pub fn method(&self) -> Method {
        let s = self.schedule;
        match (self.mode, s.mode) {
            (SamplerKind::Linear, _) => Method::linear(1),
            (SamplerKind::Selfres, ScheduleFlag::Regular) => Method::regular(s.r, s.ns),
            (SamplerKind::Selfres, ScheduleFlag::Smooth) => Method::smooth(s.r, s.ns, s.m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::preset("smoke").unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"mode": "linear", "model": {"layers": 4}}"#, "mem").unwrap();
        assert_eq!(cfg.mode, SamplerKind::Linear);
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.model.d, 64);
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"bogus": 1}"#, "mem"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn table1_grid_rows() {
        let g = table1_grid();
        assert_eq!(g.len(), 15);
        assert!(g.contains(&Method::regular(8, 3)));
        assert!(g.contains(&Method::regular(8, 5)));
    }

    #[test]
    fn clamped_layers() {
        let m = Method::regular(12, 5);
        assert_eq!(m.effective_r(8), 7);
        assert_eq!(m.r_cell(8), "12(7)");
        assert_eq!(Method::smooth(3, 5, 3).r_cell(8), "3/3");
        let s = m.schedule(8).unwrap().unwrap();
        assert_eq!(s.steps[0].layer, 7);
        assert!(Method::linear(1).schedule(8).unwrap().is_none());
        assert!(Method { ns: 0, ..Method::regular(3, 5) }.schedule(8).is_err());
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(ExperimentConfig::preset("nope"), Err(Error::Config(_))));
    }
}
