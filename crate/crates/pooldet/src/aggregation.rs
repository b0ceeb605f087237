//! Inference pipeline: decode, background elimination, vote aggregation and
//! class-aware NMS.
//!
//! Every surviving location is one vote for an object: its box is the
//! hypothesis and its score the strength. Two same-class detections whose
//! boxes overlap more than the vote threshold raise each other's score by
//! `k^(IoU - 1)` times the partner's pre-aggregation score. The update is
//! simultaneous (computed from original scores for every pair), which makes
//! it independent of detection order.

use serde::{Deserialize, Serialize};

use crate::assignment::{decode_target, GridSpec, Location, PyramidSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::model::{forward, ToyHeadParams};
use crate::num::sigmoid;
use crate::tensor::PyramidTensor;

/// One decoded detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Non-negative; may exceed 1 after vote aggregation.
    pub score: f64,
    pub source: Location,
}

/// One vote contributing to a final detection, for heatmap rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voter {
    pub source: Location,
    /// Normalized contribution; the voters of one detection sum to 1.
    pub weight: f64,
}

/// Final detection with the votes that formed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(flatten)]
    pub detection: Detection,
    pub voters: Vec<Voter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Vote-strength base: a partner at IoU v contributes k^(v-1) of its score.
    pub k: f64,
    /// Strict lower IoU bound for two detections to vote for each other.
    pub vote_iou_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Background elimination: keep detections scoring strictly above this.
    pub score_threshold: f64,
    pub per_level_topk: usize,
    pub max_detections: usize,
    /// Disabling this skips vote aggregation (scores and survivors change,
    /// boxes never do).
    pub pooling_enabled: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 40.0,
            vote_iou_threshold: 0.6,
            nms_iou_threshold: 0.5,
            score_threshold: 0.05,
            per_level_topk: 1000,
            max_detections: 100,
            pooling_enabled: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k <= 1.0 {
            return Err(Error::InvalidParameter(format!("k must exceed 1, got {}", self.k)));
        }
        for (name, v) in [
            ("vote_iou_threshold", self.vote_iou_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("score_threshold", self.score_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must be in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Decodes a location's regressed side distances into an image-space box,
/// clipped to the image bounds.
pub fn decode_box(
    grid: &GridSpec,
    i: usize,
    j: usize,
    ltrb: [f64; 4],
    image_width: f64,
    image_height: f64,
) -> BBox {
    decode_target(grid.center(i, j), ltrb, grid.stride).clip(image_width, image_height)
}

/// Background elimination plus per-level top-k: every location becomes a
/// candidate labeled with its argmax class; locations whose best score does
/// not clear the threshold are dropped, and at most `per_level_topk` survive
/// per level (ties broken by location order).
pub fn collect_detections(
    cls: &PyramidTensor,
    reg: &PyramidTensor,
    pyramid: &PyramidSpec,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let shapes = pyramid.shapes();
    let num_classes = cls.levels.first().map_or(0, |l| l.channels);
    cls.check_shape(&shapes, num_classes, "classification logits")?;
    reg.check_shape(&shapes, 4, "regression outputs")?;

    let mut all = Vec::new();
    for (grid, (cl, rl)) in pyramid.levels.iter().zip(cls.levels.iter().zip(&reg.levels)) {
        let mut level_dets = Vec::new();
        for i in 0..grid.height {
            for j in 0..grid.width {
                let logits = cl.at(i, j);
                let (class_id, &best) = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("at least one class");
                let score = sigmoid(best);
                if score <= config.score_threshold {
                    continue;
                }
                let r = rl.at(i, j);
                let bbox = decode_box(
                    grid,
                    i,
                    j,
                    [r[0], r[1], r[2], r[3]],
                    pyramid.image_width,
                    pyramid.image_height,
                );
                level_dets.push(Detection {
                    bbox,
                    class_id,
                    score,
                    source: Location {
                        level: grid.level,
                        i,
                        j,
                    },
                });
            }
        }
        if level_dets.len() > config.per_level_topk {
            let mut order: Vec<usize> = (0..level_dets.len()).collect();
            order.sort_by(|&a, &b| level_dets[b].score.total_cmp(&level_dets[a].score));
            order.truncate(config.per_level_topk);
            order.sort_unstable();
            all.extend(order.into_iter().map(|k| level_dets[k].clone()));
        } else {
            all.extend(level_dets);
        }
    }
    Ok(all)
}

/// Sorts detections into the canonical (level, i, j) order used for
/// reproducible floating-point accumulation.
fn canonical_order(dets: &mut Vec<Detection>) {
    dets.sort_by_key(|d| d.source);
}

/// Vote aggregation with per-detection voter lists.
///
/// Scores update simultaneously from the pre-aggregation values:
/// `s'_i = s_i + sum_j [class match and IoU > threshold] k^(IoU-1) * s_j`.
/// Boxes and classes never change. Voter weights are the individual
/// contributions normalized to sum 1.
pub fn vote_aggregate_with_voters(
    dets: &[Detection],
    config: &InferenceConfig,
) -> Vec<ScoredDetection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    canonical_order(&mut sorted);
    let n = sorted.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let di = &sorted[i];
        let mut voters = vec![Voter {
            source: di.source,
            weight: di.score,
        }];
        let mut total = di.score;
        for (j, dj) in sorted.iter().enumerate() {
            if j == i || dj.class_id != di.class_id {
                continue;
            }
            let v = di.bbox.iou(&dj.bbox);
            if v > config.vote_iou_threshold {
                let contribution = config.k.powf(v - 1.0) * dj.score;
                voters.push(Voter {
                    source: dj.source,
                    weight: contribution,
                });
                total += contribution;
            }
        }
        for voter in &mut voters {
            voter.weight /= total;
        }
        out.push(ScoredDetection {
            detection: Detection {
                score: total,
                ..di.clone()
            },
            voters,
        });
    }
    out
}

/// Vote aggregation returning just the rescored detections, in canonical
/// (level, i, j) order.
pub fn vote_aggregate(dets: &[Detection], config: &InferenceConfig) -> Vec<Detection> {
    vote_aggregate_with_voters(dets, config)
        .into_iter()
        .map(|sd| sd.detection)
        .collect()
}

/// Greedy NMS applied independently per class, then truncated overall.
///
/// Detections are visited in score order (ties by list position); one is kept
/// iff its IoU with every kept same-class detection stays at or below the
/// threshold. The survivors are the top `max_detections` by score.
pub fn class_aware_nms(
    dets: &[ScoredDetection],
    nms_iou_threshold: f64,
    max_detections: usize,
) -> Vec<ScoredDetection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .detection
            .score
            .total_cmp(&dets[a].detection.score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &idx in &order {
        let d = &dets[idx].detection;
        let suppressed = kept.iter().any(|&k| {
            let other = &dets[k].detection;
            other.class_id == d.class_id && other.bbox.iou(&d.bbox) > nms_iou_threshold
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept.truncate(max_detections);
    kept.into_iter().map(|k| dets[k].clone()).collect()
}

/// Full inference for one image: forward pass, background elimination, vote
/// aggregation (unless disabled) and class-aware NMS. Each final detection
/// carries its normalized voter list.
pub fn infer(
    params: &ToyHeadParams,
    image: &GrayImage,
    pyramid: &PyramidSpec,
    config: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    let (cls, reg) = forward(params, image, pyramid);
    let collected = collect_detections(&cls, &reg, pyramid, config)?;
    let scored = if config.pooling_enabled {
        vote_aggregate_with_voters(&collected, config)
    } else {
        collected
            .into_iter()
            .map(|d| ScoredDetection {
                voters: vec![Voter {
                    source: d.source,
                    weight: 1.0,
                }],
                detection: d,
            })
            .collect()
    };
    Ok(class_aware_nms(
        &scored,
        config.nms_iou_threshold,
        config.max_detections,
    ))
}
