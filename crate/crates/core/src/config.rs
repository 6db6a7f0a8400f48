//! Experiment configuration: named presets, TOML files, and dotted overrides.
//!
//! Resolution order is preset, then config file, then `key=value`
//! overrides; later layers win. The resolved config is what gets echoed
//! into a run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{HectoError, Result};
use crate::experts::{ExpertKind, TaskMode};
use crate::losses::LossWeights;
use crate::moe::{GateInput, ModelConfig, RoutingPolicy};
use crate::tasks::{TaskConfig, TaskKind};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// JSONL dataset; when absent the `task` generator is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

pub const PRESETS: [&str; 14] = [
    "desk",
    "paper-main",
    "paper-dims",
    "frozen",
    "top2",
    "no-reg",
    "experts-1",
    "experts-2",
    "experts-4",
    "gate-mean",
    "soft-routing",
    "batch-64",
    "hecto-x",
    "regressor",
];

fn desk() -> ExperimentConfig {
    ExperimentConfig {
        preset: "desk".into(),
        dataset: None,
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        task: TaskConfig::default(),
    }
}

/// Fully resolved config for a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut c = desk();
    match name {
        "desk" | "experts-2" => {}
        "paper-main" => c.train.learning_rate = 2e-5,
        "paper-dims" => {
            c.train.learning_rate = 2e-5;
            c.model.encoder.d_embed = 768;
            c.model.d_proj = 256;
            c.model.d_hid = 128;
            c.model.gate.d_hidden = 128;
        }
        "frozen" => c.model.encoder.frozen = true,
        "top2" => c.model.gate.policy = RoutingPolicy::Top2,
        "no-reg" => c.train.loss_weights = LossWeights::NONE,
        "experts-1" => c.model.experts = vec![ExpertKind::Gru],
        "experts-4" => {
            c.model.experts = vec![ExpertKind::Ffnn, ExpertKind::Ffnn, ExpertKind::Gru, ExpertKind::Gru];
        }
        "gate-mean" => c.model.gate.input_mode = GateInput::MeanPool,
        "soft-routing" => c.model.gate.policy = RoutingPolicy::Soft,
        "batch-64" => c.train.batch_size = 64,
        "hecto-x" => c.model.experts = vec![ExpertKind::Ffnn, ExpertKind::Tcn],
        "regressor" => {
            c.model.mode = TaskMode::Regression;
            c.task.kind = TaskKind::Regression;
        }
        _ => {
            return Err(HectoError::Config(format!(
                "unknown preset '{name}' (available: {})",
                PRESETS.join(", ")
            )))
        }
    }
    c.preset = name.to_string();
    Ok(c)
}

fn to_table(cfg: &ExperimentConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| HectoError::Config(e.to_string()))
}

fn from_table(t: Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| HectoError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HectoError::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut cur = table;
    for k in parents {
        cur = match cur.get_mut(*k) {
            Some(Value::Table(t)) => t,
            _ => return Err(HectoError::Config(format!("unknown config section '{k}' in '{path}'"))),
        };
    }
    // Optional keys are absent from the serialized table; allow the known ones.
    if !cur.contains_key(*last) && !(parents.is_empty() && *last == "dataset") {
        return Err(HectoError::Config(format!("unknown config key '{path}'")));
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Preset (explicit, else the file's `preset` key, else `desk`), then the
    /// file, then overrides.
    pub fn resolve(preset_name: Option<&str>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_table = file
            .map(|text| text.parse::<Table>().map_err(|e| HectoError::Config(e.to_string())))
            .transpose()?;
        let from_file = file_table
            .as_ref()
            .and_then(|t| t.get("preset"))
            .and_then(Value::as_str)
            .map(str::to_string);
        let name = preset_name.map(str::to_string).or(from_file).unwrap_or_else(|| "desk".into());
        let mut table = to_table(&preset(&name)?)?;
        if let Some(t) = file_table {
            merge(&mut table, t);
        }
        table.insert("preset".into(), Value::String(name));
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        from_table(table)
    }

    pub fn load(preset_name: Option<&str>, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| fs::read_to_string(p).map_err(|e| HectoError::io(p, e)))
            .transpose()?;
        Self::resolve(preset_name, text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let is_reg = matches!(self.model.mode, TaskMode::Regression);
        if self.dataset.is_none() && is_reg != self.task.kind.is_regression() {
            return Err(HectoError::Config(format!(
                "task '{}' does not match the model's task mode",
                self.task.kind.name()
            )));
        }
        if self.task.max_tokens > self.model.encoder.max_tokens() {
            return Err(HectoError::Config(format!(
                "task.max_tokens {} exceeds the encoder's {} positions",
                self.task.max_tokens,
                self.model.encoder.max_tokens()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HectoError::Config(e.to_string()))
    }
}
