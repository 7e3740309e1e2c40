//! Evaluation metrics for marginal and joint prediction.
//!
//! Best-of-K displacement errors and miss rate are per-scene; average
//! precision pools every (confidence, match) pair across the dataset, sweeps
//! them in confidence order, and integrates the precision envelope over
//! recall exactly (no point sampling). The soft variant ignores duplicate
//! matches instead of counting them as false positives, so it can never be
//! lower than the hard one. Joint metrics aggregate per-agent errors within
//! each joint mode and rank modes by scene score.

use crate::scene::{AgentKind, JointPredictionSet, PredictionSet, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scenes to evaluate")]
    EmptyDataset,
    #[error("scene {scene}: prediction has {pred} points, ground truth {gt}")]
    LengthMismatch { scene: String, pred: usize, gt: usize },
    #[error("scene {scene}: no predicted modes")]
    NoModes { scene: String },
    #[error("scene {0}: oracle branches required for coverage")]
    MissingOracle(String),
    #[error("scene {scene}: target agent {agent} missing from ground truth")]
    AgentMismatch { scene: String, agent: u64 },
    #[error("metric {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("mAP {map} exceeds soft mAP {soft}")]
    SoftBelowHard { map: f64, soft: f64 },
}

// ---- per-scene statistics -------------------------------------------------------

fn ade(pred: &Trajectory, gt: &Trajectory) -> f64 {
    let sum: f64 = pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(g)).sum();
    sum / pred.len() as f64
}

fn check_lengths(scene: &str, preds: &PredictionSet, gt: &Trajectory) -> Result<(), MetricsError> {
    if preds.modes.is_empty() {
        return Err(MetricsError::NoModes { scene: scene.to_string() });
    }
    for m in &preds.modes {
        if m.trajectory.len() != gt.len() {
            return Err(MetricsError::LengthMismatch {
                scene: scene.to_string(),
                pred: m.trajectory.len(),
                gt: gt.len(),
            });
        }
    }
    Ok(())
}

/// Best-of-K mean per-step displacement.
pub fn min_ade(preds: &PredictionSet, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_lengths("<direct>", preds, gt)?;
    Ok(preds.modes.iter().map(|m| ade(&m.trajectory, gt)).fold(f64::INFINITY, f64::min))
}

/// Best-of-K final-step displacement.
pub fn min_fde(preds: &PredictionSet, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_lengths("<direct>", preds, gt)?;
    Ok(preds
        .modes
        .iter()
        .map(|m| m.trajectory.endpoint().distance(&gt.endpoint()))
        .fold(f64::INFINITY, f64::min))
}

/// A scene is missed when no mode's endpoint lands within `threshold` of the
/// true endpoint.
pub fn miss(preds: &PredictionSet, gt: &Trajectory, threshold: f64) -> Result<bool, MetricsError> {
    Ok(min_fde(preds, gt)? > threshold)
}

/// Fraction of oracle branch endpoints covered by some predicted endpoint.
pub fn mode_coverage(
    preds: &PredictionSet,
    oracle: &[Trajectory],
    threshold: f64,
) -> Result<f64, MetricsError> {
    if preds.modes.is_empty() {
        return Err(MetricsError::NoModes { scene: "<direct>".to_string() });
    }
    let covered = oracle
        .iter()
        .filter(|branch| {
            let end = branch.endpoint();
            preds.modes.iter().any(|m| m.trajectory.endpoint().distance(&end) <= threshold)
        })
        .count();
    Ok(covered as f64 / oracle.len() as f64)
}

/// Does some non-matched mode outrank every matched mode? `None` when the
/// scene has no matched mode at all (such scenes don't enter the rate).
pub fn confidence_inverted(
    preds: &PredictionSet,
    gt: &Trajectory,
    threshold: f64,
) -> Result<Option<bool>, MetricsError> {
    check_lengths("<direct>", preds, gt)?;
    let end = gt.endpoint();
    let mut best_matched = f64::NEG_INFINITY;
    let mut best_unmatched = f64::NEG_INFINITY;
    let mut any_match = false;
    for m in &preds.modes {
        if m.trajectory.endpoint().distance(&end) <= threshold {
            any_match = true;
            best_matched = best_matched.max(m.confidence);
        } else {
            best_unmatched = best_unmatched.max(m.confidence);
        }
    }
    if !any_match {
        return Ok(None);
    }
    Ok(Some(best_unmatched > best_matched))
}

// ---- average precision ----------------------------------------------------------

/// One pooled prediction for the AP sweep. `scene` must already be a rank in
/// scene-id order so the tie rule is independent of input order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledPrediction {
    pub confidence: f64,
    pub matched: bool,
    pub scene: usize,
    pub mode: usize,
}

/// Sweep pooled predictions in descending confidence (ties: scene rank, then
/// mode index). The first match per scene is a true positive; later matches
/// of the same scene are false positives ("hard") or skipped ("soft");
/// non-matches are false positives. Recall is against `scene_count`. The
/// final score integrates the running precision envelope over recall.
pub fn average_precision(
    mut pool: Vec<PooledPrediction>,
    scene_count: usize,
    soft: bool,
) -> Result<f64, MetricsError> {
    if scene_count == 0 {
        return Err(MetricsError::EmptyDataset);
    }
    pool.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences must not be NaN")
            .then(a.scene.cmp(&b.scene))
            .then(a.mode.cmp(&b.mode))
    });

    let mut scene_has_tp = vec![false; scene_count];
    let mut tp = 0usize;
    let mut fp = 0usize;
    // (recall, precision) after each counted prediction.
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pool.len());
    for p in &pool {
        if p.matched && !scene_has_tp[p.scene] {
            scene_has_tp[p.scene] = true;
            tp += 1;
        } else if p.matched {
            if soft {
                continue; // duplicate match: invisible to the soft sweep
            }
            fp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / scene_count as f64, tp as f64 / (tp + fp) as f64));
    }

    // Monotone precision envelope (right-to-left running max), then exact
    // rectangle integration over the recall increments.
    let mut auc = 0.0;
    let n = curve.len();
    let mut env = vec![0.0f64; n];
    let mut run = 0.0f64;
    for i in (0..n).rev() {
        run = run.max(curve[i].1);
        env[i] = run;
    }
    let mut last_recall = 0.0;
    for i in 0..n {
        let (recall, _) = curve[i];
        if recall > last_recall {
            auc += (recall - last_recall) * env[i];
            last_recall = recall;
        }
    }
    Ok(auc)
}

// ---- dataset evaluation ---------------------------------------------------------

/// Everything the evaluator needs for one scene.
#[derive(Debug, Clone)]
pub struct SceneEvalInput {
    pub scene_id: String,
    pub kind: AgentKind,
    pub preds: PredictionSet,
    pub gt: Trajectory,
    pub oracle: Option<Vec<Trajectory>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub m_ap: f64,
    pub soft_m_ap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub scenes: usize,
    /// Match/miss threshold used throughout, meters.
    pub threshold: f64,
    pub per_kind: BTreeMap<String, KindMetrics>,
    /// Dataset-wide numbers; `m_ap` here is the mean of the per-kind APs.
    pub aggregate: KindMetrics,
}

fn fraction_ok(name: &'static str, v: f64) -> Result<(), MetricsError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(MetricsError::OutOfRange { name, value: v });
    }
    Ok(())
}

impl MetricReport {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for m in self.per_kind.values().chain([&self.aggregate]) {
            fraction_ok("miss_rate", m.miss_rate)?;
            fraction_ok("m_ap", m.m_ap)?;
            fraction_ok("soft_m_ap", m.soft_m_ap)?;
            if let Some(c) = m.coverage {
                fraction_ok("coverage", c)?;
            }
            if let Some(i) = m.inversion_rate {
                fraction_ok("inversion_rate", i)?;
            }
            if m.m_ap > m.soft_m_ap + 1e-12 {
                return Err(MetricsError::SoftBelowHard { map: m.m_ap, soft: m.soft_m_ap });
            }
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "scenes,threshold,min_ade,min_fde,miss_rate,m_ap,soft_m_ap,coverage,inversion_rate"
    }

    /// Aggregate row matching [`MetricReport::csv_header`]. Optional fields
    /// render as empty cells.
    pub fn csv_row(&self) -> String {
        let opt = |o: Option<f64>| o.map(|v| format!("{v}")).unwrap_or_default();
        let a = &self.aggregate;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.scenes,
            self.threshold,
            a.min_ade,
            a.min_fde,
            a.miss_rate,
            a.m_ap,
            a.soft_m_ap,
            opt(a.coverage),
            opt(a.inversion_rate)
        )
    }
}

struct SceneStats {
    kind: AgentKind,
    min_ade: f64,
    min_fde: f64,
    missed: bool,
    coverage: Option<f64>,
    inverted: Option<bool>,
    pooled: Vec<(f64, bool, usize)>, // confidence, matched, mode index
}

fn summarize(
    stats: &[&SceneStats],
    pool: Vec<PooledPrediction>,
    soft_pool: Vec<PooledPrediction>,
) -> Result<KindMetrics, MetricsError> {
    let n = stats.len();
    let covered: Vec<f64> = stats.iter().filter_map(|s| s.coverage).collect();
    let inversions: Vec<bool> = stats.iter().filter_map(|s| s.inverted).collect();
    Ok(KindMetrics {
        scenes: n,
        min_ade: stats.iter().map(|s| s.min_ade).sum::<f64>() / n as f64,
        min_fde: stats.iter().map(|s| s.min_fde).sum::<f64>() / n as f64,
        miss_rate: stats.iter().filter(|s| s.missed).count() as f64 / n as f64,
        m_ap: average_precision(pool, n, false)?,
        soft_m_ap: average_precision(soft_pool, n, true)?,
        coverage: if covered.is_empty() {
            None
        } else {
            Some(covered.iter().sum::<f64>() / covered.len() as f64)
        },
        inversion_rate: if inversions.is_empty() {
            None
        } else {
            Some(inversions.iter().filter(|&&b| b).count() as f64 / inversions.len() as f64)
        },
    })
}

/// Evaluate a marginal-prediction dataset. Scene order does not matter: all
/// sweeps key on scene id.
pub fn evaluate_marginal(
    inputs: &[SceneEvalInput],
    threshold: f64,
) -> Result<MetricReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    // Canonical order: scene id.
    let mut order: Vec<&SceneEvalInput> = inputs.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));

    let stats: Vec<SceneStats> = order
        .par_iter()
        .map(|s| -> Result<SceneStats, MetricsError> {
            check_lengths(&s.scene_id, &s.preds, &s.gt)?;
            let end = s.gt.endpoint();
            let pooled = s
                .preds
                .modes
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    (m.confidence, m.trajectory.endpoint().distance(&end) <= threshold, i)
                })
                .collect();
            Ok(SceneStats {
                kind: s.kind,
                min_ade: min_ade(&s.preds, &s.gt)?,
                min_fde: min_fde(&s.preds, &s.gt)?,
                missed: miss(&s.preds, &s.gt, threshold)?,
                coverage: match &s.oracle {
                    Some(o) if !o.is_empty() => Some(mode_coverage(&s.preds, o, threshold)?),
                    _ => None,
                },
                inverted: confidence_inverted(&s.preds, &s.gt, threshold)?,
                pooled,
            })
        })
        .collect::<Result<_, _>>()?;

    // Group scenes by target kind; each group gets its own AP with its own
    // scene ranks.
    let mut report = MetricReport {
        version: REPORT_VERSION,
        scenes: stats.len(),
        threshold,
        per_kind: BTreeMap::new(),
        aggregate: KindMetrics {
            scenes: 0,
            min_ade: 0.0,
            min_fde: 0.0,
            miss_rate: 0.0,
            m_ap: 0.0,
            soft_m_ap: 0.0,
            coverage: None,
            inversion_rate: None,
        },
    };
    for kind in AgentKind::ALL {
        let members: Vec<&SceneStats> = stats.iter().filter(|s| s.kind == kind).collect();
        if members.is_empty() {
            continue;
        }
        let pool: Vec<PooledPrediction> = members
            .iter()
            .enumerate()
            .flat_map(|(rank, s)| {
                s.pooled.iter().map(move |&(confidence, matched, mode)| PooledPrediction {
                    confidence,
                    matched,
                    scene: rank,
                    mode,
                })
            })
            .collect();
        let metrics = summarize(&members, pool.clone(), pool)?;
        report.per_kind.insert(kind.label().to_string(), metrics);
    }

    let all: Vec<&SceneStats> = stats.iter().collect();
    let pool: Vec<PooledPrediction> = all
        .iter()
        .enumerate()
        .flat_map(|(rank, s)| {
            s.pooled.iter().map(move |&(confidence, matched, mode)| PooledPrediction {
                confidence,
                matched,
                scene: rank,
                mode,
            })
        })
        .collect();
    let mut aggregate = summarize(&all, pool.clone(), pool)?;
    // Dataset mAP is the mean over kinds, not the pooled sweep.
    aggregate.m_ap =
        report.per_kind.values().map(|m| m.m_ap).sum::<f64>() / report.per_kind.len() as f64;
    aggregate.soft_m_ap =
        report.per_kind.values().map(|m| m.soft_m_ap).sum::<f64>() / report.per_kind.len() as f64;
    report.aggregate = aggregate;
    report.validate()?;
    Ok(report)
}

// ---- joint metrics --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMissRule {
    /// A joint mode misses when any agent's endpoint is off (default).
    AnyAgentMisses,
    /// A joint mode misses only when every agent's endpoint is off.
    AllAgentsMiss,
}

#[derive(Debug, Clone)]
pub struct JointSceneEvalInput {
    pub scene_id: String,
    pub kinds: Vec<AgentKind>,
    pub preds: JointPredictionSet,
    pub gt: BTreeMap<u64, Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMetricReport {
    pub version: u32,
    pub scenes: usize,
    pub threshold: f64,
    pub miss_rule: JointMissRule,
    pub joint_min_ade: f64,
    pub joint_min_fde: f64,
    pub joint_miss_rate: f64,
    pub joint_m_ap: f64,
    pub joint_soft_m_ap: f64,
}

impl JointMetricReport {
    pub fn validate(&self) -> Result<(), MetricsError> {
        fraction_ok("joint_miss_rate", self.joint_miss_rate)?;
        fraction_ok("joint_m_ap", self.joint_m_ap)?;
        fraction_ok("joint_soft_m_ap", self.joint_soft_m_ap)?;
        if self.joint_m_ap > self.joint_soft_m_ap + 1e-12 {
            return Err(MetricsError::SoftBelowHard {
                map: self.joint_m_ap,
                soft: self.joint_soft_m_ap,
            });
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "scenes,threshold,joint_min_ade,joint_min_fde,joint_miss_rate,joint_m_ap,joint_soft_m_ap"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenes,
            self.threshold,
            self.joint_min_ade,
            self.joint_min_fde,
            self.joint_miss_rate,
            self.joint_m_ap,
            self.joint_soft_m_ap
        )
    }
}

struct JointShape<'a> {
    input: &'a JointSceneEvalInput,
    truths: Vec<&'a Trajectory>,
}

fn joint_shape<'a>(s: &'a JointSceneEvalInput) -> Result<JointShape<'a>, MetricsError> {
    if s.preds.modes.is_empty() {
        return Err(MetricsError::NoModes { scene: s.scene_id.clone() });
    }
    let mut truths = Vec::with_capacity(s.preds.target_ids.len());
    for (a, id) in s.preds.target_ids.iter().enumerate() {
        let gt = s.gt.get(id).ok_or(MetricsError::AgentMismatch {
            scene: s.scene_id.clone(),
            agent: *id,
        })?;
        for m in &s.preds.modes {
            let t = m.trajectories.get(a).ok_or(MetricsError::AgentMismatch {
                scene: s.scene_id.clone(),
                agent: *id,
            })?;
            if t.len() != gt.len() {
                return Err(MetricsError::LengthMismatch {
                    scene: s.scene_id.clone(),
                    pred: t.len(),
                    gt: gt.len(),
                });
            }
        }
        truths.push(gt);
    }
    Ok(JointShape { input: s, truths })
}

/// Per joint mode: mean-over-agents error. Per scene: min over joint modes.
pub fn joint_min_ade(
    preds: &JointPredictionSet,
    gt: &BTreeMap<u64, Trajectory>,
) -> Result<f64, MetricsError> {
    let s = JointSceneEvalInput {
        scene_id: "<direct>".to_string(),
        kinds: vec![],
        preds: preds.clone(),
        gt: gt.clone(),
    };
    let shape = joint_shape(&s)?;
    Ok(shape
        .input
        .preds
        .modes
        .iter()
        .map(|m| {
            m.trajectories.iter().zip(&shape.truths).map(|(p, g)| ade(p, g)).sum::<f64>()
                / m.trajectories.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

pub fn joint_min_fde(
    preds: &JointPredictionSet,
    gt: &BTreeMap<u64, Trajectory>,
) -> Result<f64, MetricsError> {
    let s = JointSceneEvalInput {
        scene_id: "<direct>".to_string(),
        kinds: vec![],
        preds: preds.clone(),
        gt: gt.clone(),
    };
    let shape = joint_shape(&s)?;
    Ok(shape
        .input
        .preds
        .modes
        .iter()
        .map(|m| {
            m.trajectories
                .iter()
                .zip(&shape.truths)
                .map(|(p, g)| p.endpoint().distance(&g.endpoint()))
                .sum::<f64>()
                / m.trajectories.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

fn joint_mode_misses(
    mode_trajs: &[Trajectory],
    truths: &[&Trajectory],
    threshold: f64,
    rule: JointMissRule,
) -> bool {
    let agent_miss =
        |p: &Trajectory, g: &&Trajectory| p.endpoint().distance(&g.endpoint()) > threshold;
    match rule {
        JointMissRule::AnyAgentMisses => {
            mode_trajs.iter().zip(truths).any(|(p, g)| agent_miss(p, g))
        }
        JointMissRule::AllAgentsMiss => {
            mode_trajs.iter().zip(truths).all(|(p, g)| agent_miss(p, g))
        }
    }
}

/// Scene-level joint miss: every joint mode misses under the chosen rule.
pub fn joint_miss(
    preds: &JointPredictionSet,
    gt: &BTreeMap<u64, Trajectory>,
    threshold: f64,
    rule: JointMissRule,
) -> Result<bool, MetricsError> {
    let s = JointSceneEvalInput {
        scene_id: "<direct>".to_string(),
        kinds: vec![],
        preds: preds.clone(),
        gt: gt.clone(),
    };
    let shape = joint_shape(&s)?;
    Ok(shape
        .input
        .preds
        .modes
        .iter()
        .all(|m| joint_mode_misses(&m.trajectories, &shape.truths, threshold, rule)))
}

/// Evaluate a joint-prediction dataset. A joint prediction "matches" for the
/// AP sweep when every agent's endpoint is within the threshold.
pub fn evaluate_joint(
    inputs: &[JointSceneEvalInput],
    threshold: f64,
    rule: JointMissRule,
) -> Result<JointMetricReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut order: Vec<&JointSceneEvalInput> = inputs.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));

    struct Stat {
        ade: f64,
        fde: f64,
        missed: bool,
        pooled: Vec<(f64, bool, usize)>,
    }
    let stats: Vec<Stat> = order
        .par_iter()
        .map(|s| -> Result<Stat, MetricsError> {
            let shape = joint_shape(s)?;
            let pooled = s
                .preds
                .modes
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let matched = !joint_mode_misses(
                        &m.trajectories,
                        &shape.truths,
                        threshold,
                        JointMissRule::AnyAgentMisses,
                    );
                    (m.scene_score, matched, i)
                })
                .collect();
            Ok(Stat {
                ade: joint_min_ade(&s.preds, &s.gt)?,
                fde: joint_min_fde(&s.preds, &s.gt)?,
                missed: joint_miss(&s.preds, &s.gt, threshold, rule)?,
                pooled,
            })
        })
        .collect::<Result<_, _>>()?;

    let n = stats.len();
    let pool: Vec<PooledPrediction> = stats
        .iter()
        .enumerate()
        .flat_map(|(rank, s)| {
            s.pooled.iter().map(move |&(confidence, matched, mode)| PooledPrediction {
                confidence,
                matched,
                scene: rank,
                mode,
            })
        })
        .collect();
    let report = JointMetricReport {
        version: REPORT_VERSION,
        scenes: n,
        threshold,
        miss_rule: rule,
        joint_min_ade: stats.iter().map(|s| s.ade).sum::<f64>() / n as f64,
        joint_min_fde: stats.iter().map(|s| s.fde).sum::<f64>() / n as f64,
        joint_miss_rate: stats.iter().filter(|s| s.missed).count() as f64 / n as f64,
        joint_m_ap: average_precision(pool.clone(), n, false)?,
        joint_soft_m_ap: average_precision(pool, n, true)?,
    };
    report.validate()?;
    Ok(report)
}
