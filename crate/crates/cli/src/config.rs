//! Experiment configuration: a strict JSON file whose `spec` object is
//! merged over the defaults of the chosen task.

use std::path::{Path, PathBuf};

use geoilqr_core::charts::ChartId;
use geoilqr_core::tasks::{Symmetry, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "GEOILQR_SEED";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    task: TaskKind,
    #[serde(default)]
    symmetry: Option<Symmetry>,
    #[serde(default)]
    charts: Option<Vec<ChartId>>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    spec: Option<Value>,
}

/// Fully resolved configuration, written into every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub charts: Vec<ChartId>,
    pub output_dir: PathBuf,
    pub spec: TaskSpec,
}

impl ExperimentConfig {
    pub fn defaults(task: TaskKind) -> Self {
        let spec = TaskSpec::defaults(task);
        Self {
            task,
            charts: spec.charts(),
            output_dir: PathBuf::from("out"),
            spec,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), String> {
        self.spec.validate().map_err(|e| format!("spec: {e}"))?;
        if self.charts.is_empty() {
            return Err("charts: at least one chart is required".into());
        }
        if let Some(c) = self.charts.iter().find(|c| c.space() != self.spec.space()) {
            return Err(format!("charts: {c} does not belong to the {} task", self.task));
        }
        let mut seen = self.charts.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.charts.len() {
            return Err("charts: duplicate entries".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses configuration text. Errors carry line/column for syntax and
/// top-level problems and the field path for task-spec problems.
pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut defaults = match (file.task, file.symmetry) {
        (TaskKind::GraspPose3D, Some(sym)) => TaskSpec::grasp_pose3d(sym),
        (TaskKind::GraspPose3D, None) => TaskSpec::defaults(TaskKind::GraspPose3D),
        (_, Some(_)) => return Err("symmetry: only grasp_pose3d tasks take a symmetry".into()),
        (kind, None) => TaskSpec::defaults(kind),
    };
    if let Some(overrides) = file.spec {
        if !overrides.is_object() {
            return Err("spec: expected an object".into());
        }
        if overrides.get("kind").is_some() {
            return Err("spec.kind: set the task with the top-level `task` field".into());
        }
        let mut value = serde_json::to_value(&defaults).expect("spec serializes");
        merge(&mut value, overrides);
        defaults = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            format!("spec.{path}: {}", e.into_inner())
        })?;
    }
    let config = ExperimentConfig {
        task: file.task,
        charts: file.charts.unwrap_or_else(|| defaults.charts()),
        output_dir: file.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        spec: defaults,
    };
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Seed precedence: command-line flag, then environment, then config.
pub fn resolve_seed(config: &mut ExperimentConfig, flag: Option<u64>) -> Result<(), String> {
    if let Some(seed) = flag {
        config.spec.seed = seed;
    } else if let Ok(text) = std::env::var(SEED_ENV) {
        config.spec.seed = text
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={text:?} is not an unsigned integer"))?;
    }
    Ok(())
}
