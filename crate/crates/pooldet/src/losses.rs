//! Sum-pooled focal classification loss and smooth-L1 regression loss with
//! closed-form gradients.
//!
//! One object instance contributes a single focal term: the per-class sigmoid
//! probabilities of all its positive features are summed into one prediction
//! vector (clamped into `[eps, 1-eps]` so the focal loss stays defined), and
//! that pooled vector is scored once against the one-hot class target.
//! Negative locations contribute individually, and regression stays
//! per-feature for every positive location.

use serde::{Deserialize, Serialize};

use crate::assignment::{decode_target, AssignmentMap, GroundTruth, Label, Location};
use crate::error::{Error, Result};
use crate::num::{sigmoid, sigmoid_derivative};
use crate::tensor::PyramidTensor;

/// How an instance's positive features are reduced to one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Sum per-class probabilities over all members.
    Sum,
    /// Keep only the member whose decoded box overlaps the ground truth most.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal balance factor.
    pub alpha: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Weight of the regression loss in the total.
    pub regression_weight: f64,
    /// Smooth-L1 quadratic/linear transition point, in stride-normalized units.
    pub smooth_l1_beta: f64,
    /// Clamp bound keeping probabilities strictly inside (0, 1).
    pub prob_clamp_epsilon: f64,
    pub pooling_mode: PoolingMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            gamma: 1.5,
            regression_weight: 0.75,
            smooth_l1_beta: 1.0,
            prob_clamp_epsilon: 1e-4,
            pooling_mode: PoolingMode::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.regression_weight <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "regression_weight must be positive, got {}",
                self.regression_weight
            )));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "smooth_l1_beta must be positive, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(self.prob_clamp_epsilon > 0.0 && self.prob_clamp_epsilon < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "prob_clamp_epsilon must be in (0, 0.5), got {}",
                self.prob_clamp_epsilon
            )));
        }
        Ok(())
    }
}

/// Focal loss of a single probability against a binary target, with its exact
/// derivative with respect to `p`.
///
/// `y = true`: -alpha * (1-p)^gamma * ln(p); `y = false`: -(1-alpha) * p^gamma * ln(1-p).
pub fn focal_term(p: f64, y: bool, alpha: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "focal_term probability must be in (0,1), got {p}"
        )));
    }
    if y {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let grad = alpha * gamma * q.powf(gamma - 1.0) * p.ln() - alpha * q.powf(gamma) / p;
        Ok((loss, grad))
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let grad =
            -(1.0 - alpha) * gamma * p.powf(gamma - 1.0) * q.ln() + (1.0 - alpha) * p.powf(gamma) / q;
        Ok((loss, grad))
    }
}

/// Smooth-L1 value and derivative with respect to `pred`.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> (f64, f64) {
    debug_assert!(beta > 0.0);
    let d = pred - target;
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// One instance's pooled prediction: the clamped per-class probability vector
/// summed over its member features.
#[derive(Debug, Clone)]
pub struct PooledPrediction {
    pub instance_id: usize,
    pub class_id: usize,
    /// Length-C clamped pooled probabilities.
    pub pooled: Vec<f64>,
    /// Features whose scores were pooled. Under max pooling this is the single
    /// selected member.
    pub members: Vec<Location>,
}

pub struct ClassificationLoss {
    pub loss: f64,
    pub grads: PyramidTensor,
    pub pooled: Vec<PooledPrediction>,
}

pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    /// Number of pooled positive terms (= instances with at least one member).
    pub pooled_terms: usize,
    pub num_positives: usize,
    pub cls_grads: PyramidTensor,
    pub reg_grads: PyramidTensor,
}

fn level_index(assignment: &AssignmentMap, loc: Location) -> usize {
    loc.level - assignment.pyramid.min_level()
}

/// Members that represent an instance in the classification loss.
///
/// Sum pooling keeps all of them; max pooling keeps the member whose decoded
/// predicted box has the highest IoU with the ground-truth box (ties to the
/// first member in (level, i, j) order). The selection is recomputed from the
/// current regression outputs and carries no gradient of its own.
fn select_members<'a>(
    gt: &GroundTruth,
    members: &'a [Location],
    reg: &PyramidTensor,
    assignment: &AssignmentMap,
    mode: PoolingMode,
) -> &'a [Location] {
    match mode {
        PoolingMode::Sum => members,
        PoolingMode::Max => {
            let pyramid = &assignment.pyramid;
            let mut best = 0usize;
            let mut best_iou = -1.0f64;
            for (k, loc) in members.iter().enumerate() {
                let grid = pyramid.grid(loc.level);
                let lt = &reg.levels[level_index(assignment, *loc)];
                let ltrb = [
                    lt.get(loc.i, loc.j, 0),
                    lt.get(loc.i, loc.j, 1),
                    lt.get(loc.i, loc.j, 2),
                    lt.get(loc.i, loc.j, 3),
                ];
                let decoded = decode_target(grid.center(loc.i, loc.j), ltrb, grid.stride)
                    .clip(pyramid.image_width, pyramid.image_height);
                let iou = decoded.iou(&gt.bbox);
                if iou > best_iou {
                    best_iou = iou;
                    best = k;
                }
            }
            &members[best..best + 1]
        }
    }
}

/// Focal classification loss with prediction pooling.
///
/// `reg` is consulted only for max-pooling member selection. The returned
/// gradients are with respect to every classification logit, already divided
/// by the instance-count normalizer. Gradient through an active clamp is zero.
pub fn pooled_classification_loss(
    cls: &PyramidTensor,
    reg: &PyramidTensor,
    assignment: &AssignmentMap,
    gts: &[GroundTruth],
    config: &LossConfig,
) -> Result<ClassificationLoss> {
    config.validate()?;
    let shapes = assignment.pyramid.shapes();
    let num_classes = cls.levels.first().map_or(0, |l| l.channels);
    cls.check_shape(&shapes, num_classes, "classification logits")?;
    reg.check_shape(&shapes, 4, "regression outputs")?;
    for gt in gts {
        if gt.class_id >= num_classes {
            return Err(Error::InvalidAnnotation(format!(
                "instance {} has class {} but the maps carry {} classes",
                gt.instance_id, gt.class_id, num_classes
            )));
        }
    }

    let eps = config.prob_clamp_epsilon;
    let norm = gts.len().max(1) as f64;
    let mut grads = PyramidTensor::zeros_like(&shapes, num_classes);
    let mut loss = 0.0;
    let mut pooled_out = Vec::new();

    // Pooled positive terms, one per instance with members.
    for gt in gts {
        let Some(members) = assignment.members.get(&gt.instance_id) else {
            continue;
        };
        let members = select_members(gt, members, reg, assignment, config.pooling_mode);
        let mut pooled = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let raw: f64 = members
                .iter()
                .map(|loc| sigmoid(cls.levels[level_index(assignment, *loc)].get(loc.i, loc.j, c)))
                .sum();
            let clamped = raw.clamp(eps, 1.0 - eps);
            let (term, dterm) = focal_term(clamped, c == gt.class_id, config.alpha, config.gamma)?;
            loss += term;
            if raw == clamped {
                // d pooled / d logit_m = sigmoid'(logit_m); identical dterm for all members.
                for loc in members {
                    let lt = &mut grads.levels[level_index(assignment, *loc)];
                    let x = cls.levels[level_index(assignment, *loc)].get(loc.i, loc.j, c);
                    lt.add(loc.i, loc.j, c, dterm * sigmoid_derivative(x) / norm);
                }
            }
            pooled.push(clamped);
        }
        pooled_out.push(PooledPrediction {
            instance_id: gt.instance_id,
            class_id: gt.class_id,
            pooled,
            members: members.to_vec(),
        });
    }

    // Negative locations contribute individually, every class against 0.
    for (lvl_idx, level) in assignment.levels.iter().enumerate() {
        let lt = &cls.levels[lvl_idx];
        let gt_lt = &mut grads.levels[lvl_idx];
        for (cell, label) in level.labels.iter().enumerate() {
            if *label != Label::Negative {
                continue;
            }
            for c in 0..num_classes {
                let x = lt.data[cell * num_classes + c];
                let p = sigmoid(x);
                let clamped = p.clamp(eps, 1.0 - eps);
                let (term, dterm) = focal_term(clamped, false, config.alpha, config.gamma)?;
                loss += term;
                if p == clamped {
                    gt_lt.data[cell * num_classes + c] += dterm * sigmoid_derivative(x) / norm;
                }
            }
        }
    }

    Ok(ClassificationLoss {
        loss: loss / norm,
        grads,
        pooled: pooled_out,
    })
}

/// Classification plus weighted regression loss with gradients for both map
/// families.
///
/// Regression is never pooled: every positive location's four stride-
/// normalized side distances are scored against the assignment targets, and
/// the regression loss is their mean.
pub fn total_loss(
    cls: &PyramidTensor,
    reg: &PyramidTensor,
    assignment: &AssignmentMap,
    gts: &[GroundTruth],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let cls_part = pooled_classification_loss(cls, reg, assignment, gts, config)?;

    let shapes = assignment.pyramid.shapes();
    let mut reg_grads = PyramidTensor::zeros_like(&shapes, 4);
    let num_positives = assignment.num_positives();
    let mut reg_loss = 0.0;
    if num_positives > 0 {
        let denom = (num_positives * 4) as f64;
        for (lvl_idx, level) in assignment.levels.iter().enumerate() {
            let rt = &reg.levels[lvl_idx];
            let gt_rt = &mut reg_grads.levels[lvl_idx];
            for (cell, target) in level.targets.iter().enumerate() {
                let Some(target) = target else { continue };
                for (comp, &t) in target.iter().enumerate() {
                    let pred = rt.data[cell * 4 + comp];
                    let (term, dterm) = smooth_l1(pred, t, config.smooth_l1_beta);
                    reg_loss += term / denom;
                    gt_rt.data[cell * 4 + comp] =
                        config.regression_weight * dterm / denom;
                }
            }
        }
    }

    Ok(LossBreakdown {
        total: cls_part.loss + config.regression_weight * reg_loss,
        classification: cls_part.loss,
        regression: reg_loss,
        pooled_terms: cls_part.pooled.len(),
        num_positives,
        cls_grads: cls_part.grads,
        reg_grads,
    })
}
