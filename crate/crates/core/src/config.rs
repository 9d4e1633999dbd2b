//! Experiment configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::ScheduleSpec;
use crate::tasks::{preset, Task, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskRef {
    Preset(String),
    Inline(Box<TaskSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Output subdirectory; defaults to the sampler kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Falls back to the preset's ADMM defaults, then to built-in defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SamplerConfig>,
    /// DPS guidance scale; falls back to the preset default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
}

impl SamplerSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskRef,
    pub samplers: Vec<SamplerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Step counts to sweep; each run lands in `<label>/T<steps>`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t_grid: Vec<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    pub fn validate(&self) -> Result<()> {
        if self.samplers.is_empty() {
            return Err(Error::Config("`samplers` must list at least one sampler".into()));
        }
        let mut labels: Vec<String> = self.samplers.iter().map(SamplerSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("sampler labels must be unique".into()));
        }
        if self.t_grid.contains(&0) {
            return Err(Error::Config("t_grid entries must be positive".into()));
        }
        for s in &self.samplers {
            if let Some(c) = &s.config {
                c.validate()?;
            }
        }
        if let TaskRef::Preset(name) = &self.task {
            preset(name)?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        match &self.task {
            TaskRef::Preset(name) => preset(name),
            TaskRef::Inline(spec) => {
                spec.validate()?;
                Ok((**spec).clone())
            }
        }
    }

    pub fn build_task(&self, base_dir: Option<&Path>) -> Result<Task> {
        Task::build(&self.task_spec()?, base_dir)
    }

    pub fn schedule_for(&self, task: &TaskSpec) -> Result<ScheduleSpec> {
        self.schedule
            .clone()
            .or_else(|| task.defaults.as_ref().map(|d| d.schedule.clone()))
            .ok_or_else(|| Error::Config("no `schedule` given and the task has no default".into()))
    }

    /// Effective sampler settings, with the experiment seed applied.
    pub fn sampler_config(&self, sampler: &SamplerSpec, task: &TaskSpec) -> SamplerConfig {
        let mut cfg = sampler
            .config
            .clone()
            .or_else(|| task.defaults.as_ref().map(|d| d.admm.clone()))
            .unwrap_or_default();
        cfg.seed = self.seed;
        cfg
    }

    pub fn zeta_for(&self, sampler: &SamplerSpec, task: &TaskSpec) -> f64 {
        sampler
            .zeta
            .or_else(|| task.defaults.as_ref().map(|d| d.dps_zeta))
            .unwrap_or(0.0)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": {"preset": "inpaint-8"},
        "samplers": [{"kind": "admm"}, {"kind": "dps", "zeta": 0.01}],
        "seed": 3
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        let task = cfg.task_spec().unwrap();
        assert_eq!(cfg.sampler_config(&cfg.samplers[0], &task).seed, 3);
        assert_eq!(cfg.zeta_for(&cfg.samplers[1], &task), 0.01);
        assert_eq!(cfg.schedule_for(&task).unwrap().steps(), 500);
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = MINIMAL.replace("\"seed\": 3", "\"seed\": 3, \"bogus_key\": 1");
        let err = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn seed_is_mandatory_and_presets_checked() {
        assert!(
            ExperimentConfig::parse(r#"{"task": {"preset": "inpaint-8"}, "samplers": [{"kind": "admm"}]}"#).is_err()
        );
        assert!(ExperimentConfig::parse(
            r#"{"task": {"preset": "missing"}, "samplers": [{"kind": "admm"}], "seed": 1}"#
        )
        .is_err());
    }
}
