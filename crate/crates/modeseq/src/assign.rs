//! Label assignment: which mode gets supervised, and how the rest are
//! treated.
//!
//! The early-match rule picks the first mode in sequence order whose
//! distance to the ground truth is within `delta`; when nothing matches it
//! falls back to the closest mode. The classic closest-mode rule (WTA) is
//! the same code path with the early-match step disabled, so ablations
//! differ only in the selection rule. Joint (multi-agent) assignment
//! aggregates per-agent distances into one scene-level distance first.

use crate::scene::{JointPredictionSet, PredictionSet, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("trajectory length mismatch: prediction has {pred} points, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no modes to assign")]
    EmptyModes,
    #[error("target agent {0} missing from predictions or ground truth")]
    MissingAgent(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Supervise the closest mode, always.
    Wta,
    /// Supervise the earliest mode within `delta`; closest as fallback.
    Emta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoredVariant {
    /// Everything but the selected mode is a negative.
    None,
    /// Matched-but-not-selected modes are excluded from the confidence loss.
    OtherMatches,
    /// Modes decoded earlier than the selected one are excluded.
    EarlyMismatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    Endpoint,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointAggregate {
    MaxOverAgents,
    MeanOverAgents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub strategy: Strategy,
    pub ignored_variant: IgnoredVariant,
    pub distance_mode: DistanceMode,
    /// Match threshold for single-agent modes, meters.
    pub delta: f64,
    /// Match threshold for joint modes, meters.
    pub joint_delta: f64,
    pub joint_aggregate: JointAggregate,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            strategy: Strategy::Emta,
            ignored_variant: IgnoredVariant::None,
            distance_mode: DistanceMode::Endpoint,
            delta: 2.0,
            joint_delta: 2.0,
            joint_aggregate: JointAggregate::MaxOverAgents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    Positive,
    Negative,
    Ignored,
}

/// The supervision decision for one scene (or one layer's predictions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Index of the supervised mode.
    pub selected: usize,
    pub labels: Vec<ModeLabel>,
    /// Indices within threshold, ascending.
    pub matched_set: Vec<usize>,
    /// True iff nothing matched and the closest mode was used instead.
    pub fallback_used: bool,
}

impl Assignment {
    pub fn negatives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == ModeLabel::Negative)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Endpoint or whole-trajectory displacement between prediction and truth.
pub fn mode_distance(
    pred: &Trajectory,
    gt: &Trajectory,
    mode: DistanceMode,
) -> Result<f64, AssignError> {
    if pred.len() != gt.len() || pred.len() == 0 {
        return Err(AssignError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    Ok(match mode {
        DistanceMode::Endpoint => pred.endpoint().distance(&gt.endpoint()),
        DistanceMode::Average => {
            let sum: f64 =
                pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(g)).sum();
            sum / pred.len() as f64
        }
    })
}

/// Index of the smallest distance; ties and NaNs resolve to the smallest
/// index (a NaN distance never wins over a real one).
fn argmin(distances: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in distances.iter().enumerate().skip(1) {
        if d < distances[best] || distances[best].is_nan() && !d.is_nan() {
            best = i;
        }
    }
    best
}

/// Shared selection/labeling core. `distances[k]` is mode k's distance to
/// the ground truth under whatever metric the caller chose.
pub fn assign_from_distances(
    distances: &[f64],
    delta: f64,
    strategy: Strategy,
    variant: IgnoredVariant,
) -> Result<Assignment, AssignError> {
    if distances.is_empty() {
        return Err(AssignError::EmptyModes);
    }
    let matched_set: Vec<usize> =
        (0..distances.len()).filter(|&k| distances[k] <= delta).collect();
    let fallback_used = matched_set.is_empty();
    let selected = match strategy {
        Strategy::Emta if !fallback_used => matched_set[0],
        _ => argmin(distances),
    };

    let mut labels = vec![ModeLabel::Negative; distances.len()];
    labels[selected] = ModeLabel::Positive;
    match variant {
        IgnoredVariant::None => {}
        IgnoredVariant::OtherMatches => {
            for &k in &matched_set {
                if k != selected {
                    labels[k] = ModeLabel::Ignored;
                }
            }
        }
        IgnoredVariant::EarlyMismatches => {
            for l in labels.iter_mut().take(selected) {
                *l = ModeLabel::Ignored;
            }
        }
    }
    Ok(Assignment { selected, labels, matched_set, fallback_used })
}

/// Single-agent assignment over a prediction set.
pub fn emta_assign(
    preds: &PredictionSet,
    gt: &Trajectory,
    cfg: &AssignConfig,
) -> Result<Assignment, AssignError> {
    if preds.modes.is_empty() {
        return Err(AssignError::EmptyModes);
    }
    let distances = preds
        .modes
        .iter()
        .map(|m| mode_distance(&m.trajectory, gt, cfg.distance_mode))
        .collect::<Result<Vec<_>, _>>()?;
    assign_from_distances(&distances, cfg.delta, cfg.strategy, cfg.ignored_variant)
}

/// Scene-level distance of one joint mode: per-agent distances aggregated
/// across the target agents.
pub fn joint_mode_distance(
    preds: &JointPredictionSet,
    mode: usize,
    gt: &BTreeMap<u64, Trajectory>,
    distance_mode: DistanceMode,
    aggregate: JointAggregate,
) -> Result<f64, AssignError> {
    let mut per_agent = Vec::with_capacity(preds.target_ids.len());
    for (a, id) in preds.target_ids.iter().enumerate() {
        let truth = gt.get(id).ok_or(AssignError::MissingAgent(*id))?;
        let pred = preds
            .modes
            .get(mode)
            .and_then(|m| m.trajectories.get(a))
            .ok_or(AssignError::MissingAgent(*id))?;
        per_agent.push(mode_distance(pred, truth, distance_mode)?);
    }
    Ok(match aggregate {
        JointAggregate::MaxOverAgents => per_agent.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        JointAggregate::MeanOverAgents => per_agent.iter().sum::<f64>() / per_agent.len() as f64,
    })
}

/// Joint assignment: earliest joint mode whose aggregated distance is within
/// `joint_delta`, closest-mode fallback. The ignored-variant knob does not
/// apply to joint modes — labels are plain positive/negative.
pub fn ma_emta_assign(
    preds: &JointPredictionSet,
    gt: &BTreeMap<u64, Trajectory>,
    cfg: &AssignConfig,
) -> Result<Assignment, AssignError> {
    if preds.modes.is_empty() {
        return Err(AssignError::EmptyModes);
    }
    if preds.target_ids.is_empty() {
        return Err(AssignError::EmptyModes);
    }
    let distances = (0..preds.modes.len())
        .map(|k| joint_mode_distance(preds, k, gt, cfg.distance_mode, cfg.joint_aggregate))
        .collect::<Result<Vec<_>, _>>()?;
    assign_from_distances(&distances, cfg.joint_delta, cfg.strategy, IgnoredVariant::None)
}
