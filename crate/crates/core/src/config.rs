//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collab::{Layout, NetworkConfig};
use crate::detect::DetectorModel;
use crate::power::PowerProfile;
use crate::qsched::{ActionSpace, Hyperparameters};
use crate::sim::{QInit, SimSetup, TrainPlan};
use crate::trace::DiurnalProfile;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
}

fn field(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub profile: DiurnalProfile,
    pub days: usize,
}

/// Exactly one of `file` and `generate` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleConfig {
    Fixed(f64),
    Qlearn,
}

impl ScheduleConfig {
    pub fn name(&self) -> String {
        match self {
            Self::Fixed(s) => format!("fixed_{s}s"),
            Self::Qlearn => "qlearn".into(),
        }
    }
}

fn default_schedules() -> Vec<ScheduleConfig> {
    [3.0, 5.0, 60.0, 300.0, 1800.0].into_iter().map(ScheduleConfig::Fixed).chain([ScheduleConfig::Qlearn]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    #[serde(default)]
    pub settings: NetworkConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub trace: TraceSource,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<ScheduleConfig>,
    #[serde(default)]
    pub actions: ActionSpace,
    #[serde(default)]
    pub plan: TrainPlan,
    #[serde(default)]
    pub init: QInit,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    #[serde(default)]
    pub detector: DetectorModel,
    #[serde(default)]
    pub power: PowerProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSection>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config; relative paths inside it, the output directory
    /// included, are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(f) = cfg.trace.file.as_mut() {
            *f = base.join(&*f);
        }
        if let Some(f) = cfg.network.as_mut().and_then(|n| n.layout_file.as_mut()) {
            *f = base.join(&*f);
        }
        cfg.output = base.join(&cfg.output);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed.is_none() {
            return Err(field("seed", "required"));
        }
        match (&self.trace.file, &self.trace.generate) {
            (Some(_), Some(_)) => return Err(field("trace", "give either file or generate, not both")),
            (None, None) => return Err(field("trace", "one of file or generate is required")),
            (None, Some(g)) => {
                g.profile.validate().map_err(|e| field("trace.generate.profile", e.to_string()))?;
                if g.days == 0 {
                    return Err(field("trace.generate.days", "must be at least 1"));
                }
            }
            _ => {}
        }
        if self.schedules.is_empty() {
            return Err(field("schedules", "at least one schedule is required"));
        }
        let d_probe = self.power.d_probe();
        for (i, s) in self.schedules.iter().enumerate() {
            if let ScheduleConfig::Fixed(v) = s {
                if !(v.is_finite() && *v >= d_probe) {
                    return Err(field(&format!("schedules[{i}]"), format!("interval must be at least {d_probe} s")));
                }
            }
        }
        if self.actions.interval(0) < d_probe {
            return Err(field("actions", format!("shortest interval must be at least {d_probe} s")));
        }
        if self.plan.train_days == 0 || self.plan.eval_days == 0 || self.plan.episodes == 0 {
            return Err(field("plan", "train_days, eval_days and episodes must be positive"));
        }
        if let QInit::FromDistribution { scale, probes_per_period } = self.init {
            if !scale.is_finite() || probes_per_period == 0 {
                return Err(field("init", "needs a finite scale and at least one probe per period"));
            }
        }
        self.hyperparameters.validate().map_err(|e| field("hyperparameters", e.to_string()))?;
        self.detector.validate().map_err(|e| field("detector", e.to_string()))?;
        self.power.validate().map_err(|e| field("power", e.to_string()))?;
        if let Some(n) = &self.network {
            match (&n.layout_file, &n.layout) {
                (Some(_), Some(_)) => return Err(field("network", "give either layout_file or layout, not both")),
                (None, None) => return Err(field("network", "a layout is required")),
                (None, Some(l)) => l.validate().map_err(|e| field("network.layout", e.to_string()))?,
                _ => {}
            }
            n.settings.validate().map_err(|e| field("network.settings", e.to_string()))?;
        }
        Ok(())
    }

    pub fn seed_value(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn setup(&self) -> SimSetup {
        SimSetup { detector: self.detector.clone(), profile: self.power.clone(), hp: self.hyperparameters.clone() }
    }
}
