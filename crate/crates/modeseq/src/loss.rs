//! Training objectives, built on the tape so every term is differentiable.
//!
//! Per refinement layer: Laplace regression on the selected mode, focal
//! confidence loss over the non-ignored modes, and a hinge ranking loss
//! pushing the selected mode's confidence above every negative by a margin.
//! The scene objective averages the per-layer sums; each layer gets its own
//! assignment computed from its own predictions.

use crate::assign::{
    emta_assign, ma_emta_assign, AssignConfig, AssignError, Assignment, ModeLabel,
};
use crate::decoder::{joint_prediction_set_from, prediction_set_from, JointLayerVars, LayerVars};
use crate::num::{NumError, Shape, Tape, Var};
use crate::scene::Trajectory;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Confidence clamp bounds: keeps log terms finite for saturated sigmoids.
pub const CONFIDENCE_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Debug, Error)]
pub enum LossError {
    #[error("scale column {0} is not strictly positive")]
    NonPositiveScale(usize),
    #[error("all modes are ignored; the confidence loss is undefined")]
    AllIgnored,
    #[error("ground truth has {gt} waypoints but the head predicts {pred}")]
    HorizonMismatch { pred: usize, gt: usize },
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rank: f64,
    /// Ranking margin between the selected mode and each negative.
    pub margin: f64,
    /// Focal focusing exponent.
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0, lambda_rank: 1.0, margin: 0.1, focal_gamma: 2.0 }
    }
}

/// One layer's loss terms, still on the tape.
pub struct LayerLoss {
    pub total: Var,
    pub regression: Var,
    pub classification: Var,
    pub ranking: Var,
    pub assignment: Assignment,
}

/// Ground-truth trajectory as a `[1, 2T]` leaf in (x, y) interleaved layout.
pub fn trajectory_leaf(tape: &mut Tape, gt: &Trajectory) -> Result<Var, NumError> {
    let mut values = Vec::with_capacity(gt.len() * 2);
    for p in gt.points() {
        values.push(p.x);
        values.push(p.y);
    }
    tape.leaf(Shape::new(1, values.len()), values, false)
}

/// Laplace negative log-likelihood of the ground truth under per-coordinate
/// location/scale rows, summed over coordinates and averaged over waypoints:
/// `(1/T) * Σ log(2b) + |y − μ| / b`.
pub fn laplace_nll(tape: &mut Tape, loc: Var, scale: Var, gt: Var) -> Result<Var, LossError> {
    let shape = tape.shape(loc);
    if tape.shape(gt) != shape || tape.shape(scale) != shape {
        return Err(LossError::HorizonMismatch {
            pred: shape.cols / 2,
            gt: tape.shape(gt).cols / 2,
        });
    }
    for (i, &b) in tape.values(scale).iter().enumerate() {
        if !(b > 0.0) {
            return Err(LossError::NonPositiveScale(i));
        }
    }
    let waypoints = (shape.cols / 2 * shape.rows) as f64;
    let resid = tape.sub(gt, loc)?;
    let resid = tape.abs(resid);
    let ratio = tape.div(resid, scale)?;
    let log_b = tape.log(scale);
    let log_2b = tape.add_scalar(log_b, std::f64::consts::LN_2);
    let terms = tape.add(log_2b, ratio)?;
    let sum = tape.sum_all(terms);
    Ok(tape.scale(sum, 1.0 / waypoints))
}

/// Binary focal term for one confidence/label pair:
/// positives `(1−c)^γ · (−log c)`, negatives `c^γ · (−log(1−c))`.
/// Exposed for direct numeric checks; training uses [`confidence_loss`].
pub fn focal_term(tape: &mut Tape, confidence: Var, positive: bool, gamma: f64) -> Result<Var, LossError> {
    let c = tape.clamp(confidence, CONFIDENCE_CLAMP.0, CONFIDENCE_CLAMP.1);
    let one_minus = {
        let neg = tape.scale(c, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let (p_term, weight_base) = if positive { (c, one_minus) } else { (one_minus, c) };
    let weight = tape.powf(weight_base, gamma);
    let log_p = tape.log(p_term);
    let nll = tape.scale(log_p, -1.0);
    Ok(tape.mul(weight, nll)?)
}

/// Mean focal loss over the non-ignored modes. `confidences` is `[K, 1]`.
pub fn confidence_loss(
    tape: &mut Tape,
    confidences: Var,
    assignment: &Assignment,
    gamma: f64,
) -> Result<Var, LossError> {
    let k = tape.shape(confidences).rows;
    debug_assert_eq!(k, assignment.labels.len());
    let mut pos_mask = vec![0.0; k];
    let mut neg_mask = vec![0.0; k];
    let mut counted = 0usize;
    for (i, label) in assignment.labels.iter().enumerate() {
        match label {
            ModeLabel::Positive => {
                pos_mask[i] = 1.0;
                counted += 1;
            }
            ModeLabel::Negative => {
                neg_mask[i] = 1.0;
                counted += 1;
            }
            ModeLabel::Ignored => {}
        }
    }
    if counted == 0 {
        return Err(LossError::AllIgnored);
    }

    let c = tape.clamp(confidences, CONFIDENCE_CLAMP.0, CONFIDENCE_CLAMP.1);
    let one_minus = {
        let neg = tape.scale(c, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    // Positive modes: (1−c)^γ (−log c)
    let w_pos = tape.powf(one_minus, gamma);
    let log_c = tape.log(c);
    let nll_pos = tape.scale(log_c, -1.0);
    let term_pos = tape.mul(w_pos, nll_pos)?;
    // Negative modes: c^γ (−log(1−c))
    let w_neg = tape.powf(c, gamma);
    let log_1c = tape.log(one_minus);
    let nll_neg = tape.scale(log_1c, -1.0);
    let term_neg = tape.mul(w_neg, nll_neg)?;

    let pos = tape.leaf(Shape::new(k, 1), pos_mask, false)?;
    let neg = tape.leaf(Shape::new(k, 1), neg_mask, false)?;
    let masked_pos = tape.mul(term_pos, pos)?;
    let masked_neg = tape.mul(term_neg, neg)?;
    let both = tape.add(masked_pos, masked_neg)?;
    let sum = tape.sum_all(both);
    Ok(tape.scale(sum, 1.0 / counted as f64))
}

/// Mean hinge over the negatives: `(1/|N|) Σ max(0, margin − (c† − c_k))`.
/// Zero (constant) when there are no negatives. Gradient flows into both the
/// selected confidence and the violating negatives.
pub fn margin_ranking_loss(
    tape: &mut Tape,
    confidences: Var,
    assignment: &Assignment,
    margin: f64,
) -> Result<Var, LossError> {
    let negatives = assignment.negatives();
    if negatives.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let selected = tape.gather_rows(confidences, &vec![assignment.selected; negatives.len()])?;
    let negs = tape.gather_rows(confidences, &negatives)?;
    let gap = tape.sub(negs, selected)?; // c_k − c†
    let violation = tape.add_scalar(gap, margin); // margin − (c† − c_k)
    let hinge = tape.relu(violation);
    let sum = tape.sum_all(hinge);
    Ok(tape.scale(sum, 1.0 / negatives.len() as f64))
}

fn combine(
    tape: &mut Tape,
    regression: Var,
    classification: Var,
    ranking: Var,
    weights: &LossWeights,
    assignment: Assignment,
) -> Result<LayerLoss, LossError> {
    let cls_w = tape.scale(classification, weights.lambda_cls);
    let rank_w = tape.scale(ranking, weights.lambda_rank);
    let partial = tape.add(regression, cls_w)?;
    let total = tape.add(partial, rank_w)?;
    Ok(LayerLoss { total, regression, classification, ranking, assignment })
}

/// Full objective for one single-agent layer: assignment from this layer's
/// own predictions, regression on the selected mode only, confidence and
/// ranking terms over the whole mode set.
pub fn single_agent_layer_loss(
    tape: &mut Tape,
    layer: &LayerVars,
    gt: &Trajectory,
    assign_cfg: &AssignConfig,
    weights: &LossWeights,
) -> Result<LayerLoss, LossError> {
    let preds = prediction_set_from(tape, layer);
    let assignment = emta_assign(&preds, gt, assign_cfg)?;

    let sel = [assignment.selected];
    let loc = tape.gather_rows(layer.locations, &sel)?;
    let scale = tape.gather_rows(layer.scales, &sel)?;
    let gt_leaf = trajectory_leaf(tape, gt)?;
    let regression = laplace_nll(tape, loc, scale, gt_leaf)?;
    let classification = confidence_loss(tape, layer.confidences, &assignment, weights.focal_gamma)?;
    let ranking = margin_ranking_loss(tape, layer.confidences, &assignment, weights.margin)?;
    combine(tape, regression, classification, ranking, weights, assignment)
}

/// Joint counterpart: scene-level assignment, regression over every agent of
/// the selected joint mode, confidence/ranking on the scene scores.
pub fn joint_layer_loss(
    tape: &mut Tape,
    layer: &JointLayerVars,
    target_ids: &[u64],
    gt: &BTreeMap<u64, Trajectory>,
    assign_cfg: &AssignConfig,
    weights: &LossWeights,
) -> Result<LayerLoss, LossError> {
    let preds = joint_prediction_set_from(tape, layer, target_ids);
    let assignment = ma_emta_assign(&preds, gt, assign_cfg)?;

    let agents = layer.agents;
    let rows: Vec<usize> =
        (0..agents).map(|a| crate::decoder::joint_row(assignment.selected, a, agents)).collect();
    let loc = tape.gather_rows(layer.locations, &rows)?;
    let scale = tape.gather_rows(layer.scales, &rows)?;
    let mut gt_values = Vec::new();
    let mut cols = 0;
    for id in target_ids {
        let truth = gt.get(id).ok_or(AssignError::MissingAgent(*id))?;
        cols = truth.len() * 2;
        for p in truth.points() {
            gt_values.push(p.x);
            gt_values.push(p.y);
        }
    }
    let gt_leaf = tape.leaf(Shape::new(agents, cols), gt_values, false)?;
    // laplace_nll averages over rows × waypoints, i.e. per agent per step.
    let regression = laplace_nll(tape, loc, scale, gt_leaf)?;
    let classification = confidence_loss(tape, layer.scene_scores, &assignment, weights.focal_gamma)?;
    let ranking = margin_ranking_loss(tape, layer.scene_scores, &assignment, weights.margin)?;
    combine(tape, regression, classification, ranking, weights, assignment)
}

/// Scene objective: arithmetic mean of the per-layer totals.
pub fn average_layer_losses(tape: &mut Tape, layers: &[LayerLoss]) -> Result<Var, LossError> {
    assert!(!layers.is_empty(), "at least one layer loss required");
    let mut acc = layers[0].total;
    for l in &layers[1..] {
        acc = tape.add(acc, l.total)?;
    }
    Ok(tape.scale(acc, 1.0 / layers.len() as f64))
}
