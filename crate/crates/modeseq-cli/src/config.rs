//! Run configuration: a TOML file with `[model]`, `[train]`, and `[eval]`
//! sections layered under CLI flags. Resolution order is preset, then file,
//! then flags — the flag always wins. The fully resolved config lands in the
//! run manifest so no default stays hidden.

use crate::error::CliError;
use modeseq::metrics::JointMissRule;
use modeseq::model::ModelConfig;
use modeseq::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Endpoint match/miss threshold in meters.
    pub threshold: f64,
    /// Decode this many modes instead of the trained K (mode extrapolation).
    pub modes: Option<usize>,
    /// Joint-mode miss rule; ignored for marginal models.
    pub miss_rule: JointMissRule,
    /// Rayon threads for per-scene evaluation. The merge is deterministic
    /// either way; 1 keeps the whole command single-threaded.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 2.0,
            modes: None,
            miss_rule: JointMissRule::AnyAgentMisses,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig, CliError> {
        match name {
            "desk" => Ok(RunConfig {
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                eval: EvalConfig::default(),
            }),
            "paper" => Ok(RunConfig {
                model: ModelConfig::paper(),
                train: TrainConfig::paper(),
                eval: EvalConfig::default(),
            }),
            other => Err(CliError::Config(format!(
                "unknown preset '{other}' (expected desk or paper)"
            ))),
        }
    }

    /// Layer a TOML file over `self`. Sections and keys the file omits keep
    /// their current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;

        // Round-trip through TOML so the file's keys overwrite only what
        // they name. serde(default) cannot express "default to the current
        // value", so splice at the table level instead.
        let mut base = toml::Table::try_from(self.clone())
            .map_err(|e| CliError::Config(format!("internal config encode: {e}")))?;
        merge_tables(&mut base, table);
        *self = base
            .try_into()
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        Ok(())
    }

    /// Validate everything at once and name every offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let m = &self.model;
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
            problems.push(format!(
                "model.dim ({}) must be a positive multiple of model.heads ({})",
                m.dim, m.heads
            ));
        }
        if m.layers == 0 {
            problems.push("model.layers must be >= 1".to_string());
        }
        if m.modes == 0 {
            problems.push("model.modes must be >= 1".to_string());
        }
        if m.modes > m.max_modes || m.max_modes > modeseq::decoder::MAX_MODES {
            problems.push(format!(
                "model.modes ({}) must be <= model.max_modes ({}) <= {}",
                m.modes,
                m.max_modes,
                modeseq::decoder::MAX_MODES
            ));
        }
        if m.t_obs == 0 {
            problems.push("model.t_obs must be >= 1".to_string());
        }
        if m.t_hat == 0 {
            problems.push("model.t_hat must be >= 1".to_string());
        }
        if m.ffn_hidden == 0 {
            problems.push("model.ffn_hidden must be >= 1".to_string());
        }

        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            problems.push(format!("train.lr ({}) must be positive and finite", t.lr));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            problems.push(format!("train.weight_decay ({}) must be >= 0", t.weight_decay));
        }
        if !(0.0..1.0).contains(&t.beta1) {
            problems.push(format!("train.beta1 ({}) must lie in [0, 1)", t.beta1));
        }
        if !(0.0..1.0).contains(&t.beta2) {
            problems.push(format!("train.beta2 ({}) must lie in [0, 1)", t.beta2));
        }
        if t.eps <= 0.0 {
            problems.push(format!("train.eps ({}) must be positive", t.eps));
        }
        if t.epochs == 0 {
            problems.push("train.epochs must be >= 1".to_string());
        }
        if t.batch_size == 0 {
            problems.push("train.batch_size must be >= 1".to_string());
        }
        if !(t.grad_clip.is_finite() && t.grad_clip > 0.0) {
            problems.push(format!("train.grad_clip ({}) must be positive", t.grad_clip));
        }
        if t.checkpoint_every == Some(0) {
            problems.push("train.checkpoint_every must be >= 1 when set".to_string());
        }
        if !(t.assign.delta.is_finite() && t.assign.delta > 0.0) {
            problems.push(format!("train.assign.delta ({}) must be positive", t.assign.delta));
        }
        if !(t.assign.joint_delta.is_finite() && t.assign.joint_delta > 0.0) {
            problems.push(format!(
                "train.assign.joint_delta ({}) must be positive",
                t.assign.joint_delta
            ));
        }

        let e = &self.eval;
        if !(e.threshold.is_finite() && e.threshold > 0.0) {
            problems.push(format!("eval.threshold ({}) must be positive", e.threshold));
        }
        if let Some(modes) = e.modes {
            if modes == 0 || modes > m.max_modes {
                problems.push(format!(
                    "eval.modes ({modes}) must lie in 1..={}",
                    m.max_modes
                ));
            }
        }
        if e.threads == 0 {
            problems.push("eval.threads must be >= 1".to_string());
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }
}

/// Recursive right-biased table merge: values in `over` replace values in
/// `base`; nested tables merge key by key.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
